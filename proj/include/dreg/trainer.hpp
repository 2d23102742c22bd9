#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dreg/config.hpp"
#include "dreg/image_io.hpp"
#include "dreg/losses.hpp"
#include "dreg/metrics.hpp"
#include "dreg/network.hpp"
#include "dreg/phantom.hpp"
#include "dreg/statmodel.hpp"

namespace dreg {

// sr: one organ's surface graph per model. mr: all organs joined by bridge edges.
enum class RegMode { sr, mr };

RegMode reg_mode_from_string(const std::string& s);
std::string to_string(RegMode mode);

struct TrainConfig {
  int epochs = 300;
  int batch_size = 1;
  double lr = 1e-4;
  LossWeights weights;
  std::uint64_t seed = 1;
  std::filesystem::path data_dir;
  bool augment = false;
  AugmentConfig augment_config;
  double augment_fraction = 0.5;  // share of steps drawing a synthesized pair
  std::filesystem::path statmodel_path;  // empty: fit on the training split
  bool jitter = false;
  double jitter_scale = 2.0;  // jitter bound in units of the dataset mean displacement
  RegMode mode = RegMode::mr;
  int organ = 0;  // sr only
  int bridge_count = kDefaultBridgeCount;
  ArchConfig arch;

  void validate() const;
  static TrainConfig from_config(const KeyValueConfig& kv);
  KeyValueConfig to_config() const;
  std::uint64_t hash() const;
};

// Keys understood by TrainConfig::from_config.
const std::set<std::string>& train_config_keys();

// One registration problem as the model sees it: the template graph, its
// ground-truth positions, and the rendered inputs and map target.
struct RegistrationCase {
  int id = 0;
  Mesh mesh;  // template in mm, including bridges in mr mode
  std::vector<Vec3> target;
  Image image;
  SemanticLabel label;
  DisplacementMap map;
  int organ_count = 1;
};

RegistrationCase make_case(const Camera& camera, const Sample& sample, int id, RegMode mode, int organ,
                           int bridge_count);
// Same case with moved template vertices; label and map are re-rendered, bridges kept.
RegistrationCase with_case_template(const Camera& camera, const RegistrationCase& c, std::vector<Vec3> positions);

struct EpochRecord {
  int epoch = 0;
  LossReport mean;
};

struct EvalOptions {
  bool jitter = false;
  double jitter_scale = 2.0;
  std::uint64_t eval_seed = 7;
  double dsc_voxel_mm = kDefaultDscVoxelMm;
};

struct SampleMetrics {
  int id = 0;
  std::vector<MetricReport> initial;  // per organ
  std::vector<MetricReport> predicted;
  Vec3 jitter;

  MetricReport mean_initial() const;
  MetricReport mean_predicted() const;
};

struct MetricSummary {
  MetricReport mean;
  MetricReport stddev;
};

struct EvalReport {
  std::vector<SampleMetrics> samples;
  std::vector<int> organs;  // dataset organ index of each per-organ column

  MetricSummary initial() const;
  MetricSummary predicted() const;
  MetricSummary initial_organ(std::size_t k) const;
  MetricSummary predicted_organ(std::size_t k) const;
  nlohmann::json summary_json() const;
};

struct Checkpoint {
  nn::Model<float> model;
  RegMode mode = RegMode::mr;
  int organ = 0;
  int organ_count = 1;
  int bridge_count = kDefaultBridgeCount;
  Box normalization_box;
  LossCalibration calibration;
  int epoch = 0;
  std::uint64_t seed = 0;
  std::uint64_t config_hash = 0;

  TensorBundle to_bundle() const;
  static Checkpoint from_bundle(const TensorBundle& bundle);
};

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct RunRecord {
  std::vector<EpochRecord> epochs;
  long optimizer_steps = 0;
  double wall_seconds = 0.0;
  std::uint64_t config_hash = 0;
  std::filesystem::path checkpoint_path;
  LossCalibration calibration;
};

struct TrainResult {
  RunRecord record;
  Checkpoint checkpoint;
};

// Initial-model loss maxima over `cases`; a zero maximum falls back to 1.
LossCalibration calibrate(const nn::Model<float>& model, const std::vector<RegistrationCase>& cases,
                          const Camera& camera, const CoordinateNormalizer& normalizer);

// Trains on the dataset's training split. When `failure_checkpoint` is set and
// a step produces a non-finite loss or gradient, the last good parameters are
// written there before NumericError propagates.
TrainResult train(const TrainConfig& config, const Dataset& dataset,
                  const std::filesystem::path& failure_checkpoint = {});

// Evaluates on the test split (or the samples given by `ids`).
EvalReport evaluate(const Checkpoint& checkpoint, const Dataset& dataset, const EvalOptions& options,
                    const std::vector<int>& ids = {});

// Rows: id, initial and predicted MD/HD/MAE/DSC averaged over organs, then a `mean` row.
void write_metrics_csv(const EvalReport& report, const std::filesystem::path& path);
// Rows: epoch, normalized and raw loss terms.
void write_curve_csv(const RunRecord& record, const std::filesystem::path& path);

struct OrganComparison {
  int organ = 0;
  MetricSummary initial;
  MetricSummary sr;
  MetricSummary mr;
};

struct ExperimentReport {
  std::vector<OrganComparison> organs;
  TrainResult mr;
  std::vector<TrainResult> sr;  // one per organ
};

// Needs a dataset with at least two organs; `config.mode` and `config.organ` are ignored.
ExperimentReport run_experiment(const TrainConfig& config, const Dataset& dataset, const EvalOptions& options);
void write_experiment_csv(const ExperimentReport& report, const std::filesystem::path& path);

struct Overlay {
  RgbImage image;
  std::vector<std::pair<int, int>> target_pixels;     // magenta
  std::vector<std::pair<int, int>> predicted_pixels;  // cyan
};

// Grey input image with projected target (magenta) and predicted (cyan) vertices.
Overlay render_overlay(const Camera& camera, const Image& image, std::span<const Vec3> target,
                       std::span<const Vec3> predicted);
// Runs the checkpoint on one dataset sample and draws the result.
Overlay render_overlay(const Checkpoint& checkpoint, const Dataset& dataset, int sample_id);

struct GradcheckEntry {
  std::string name;
  std::size_t checked = 0;
  std::size_t skipped = 0;  // probes redrawn because the step crossed a kink
  double max_rel_error = 0.0;
  bool passed = true;
};

struct GradcheckOptions {
  double step = 1e-3;
  double tolerance = 1e-3;
  int entries_per_tensor = 8;
  std::uint64_t seed = 1;
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;
  double seconds = 0.0;

  bool passed() const;
  double max_rel_error() const;
};

// Central differences on the 16x16 / 12-vertex smoke model in double precision.
GradcheckReport run_gradcheck(const GradcheckOptions& options = {});

}  // namespace dreg
