#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "speedvae/evaluation.hpp"
#include "speedvae/models.hpp"
#include "speedvae/training.hpp"

namespace speedvae {

// ---------------------------------------------------------------------------
// Config files

/// `[section]` headers followed by `key = value` lines; `#` and `;` start
/// comments. Keys are addressed as "section.key".
class IniDocument {
 public:
  struct Entry {
    std::string value;
    int line = 0;
  };

  static IniDocument parse(std::string_view text);
  static IniDocument load(const std::string& path);

  const std::map<std::string, Entry>& entries() const { return entries_; }
  bool contains(const std::string& key) const { return entries_.count(key) != 0; }
  void set(const std::string& key, const std::string& value);

 private:
  std::map<std::string, Entry> entries_;
};

enum class DatasetSource { SyntheticLinear, SyntheticNonlinear, File };
enum class ModelKind { LinearHVAE, HVAEStack, Mlp };

struct DatasetSpec {
  DatasetSource source = DatasetSource::SyntheticLinear;
  std::size_t n1 = 10, n2 = 20, dx = 100, N = 1000;
  double obs_sigma = 0.5;
  std::uint64_t gen_seed = 1;
  /// Hidden width of the nonlinear generator.
  std::size_t hidden = 32;
  std::string path;
};

struct ModelSpec {
  ModelKind kind = ModelKind::LinearHVAE;
  std::size_t n1 = 10, n2 = 20, hidden = 32;
  ObservationKind observation = ObservationKind::Gaussian;
  double obs_sigma = 0.5;
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::string out_dir = "out";
  /// Seeds per sweep cell.
  std::size_t seeds = 1;
  bool slow = false;
  DatasetSpec dataset;
  ModelSpec model;
  TrainConfig train;
  ISConfig eval;
  /// Rows used for the importance-sampling estimate (0 = all).
  std::size_t eval_rows = 0;

  /// Throws ConfigError.
  void validate() const;
};

/// Throws ConfigError naming the key and line on unknown keys or bad values.
ExperimentConfig parse_experiment_config(const IniDocument& doc, ExperimentConfig base = {});
ExperimentConfig load_experiment_config(const std::string& path);
/// Round-trips through parse_experiment_config.
std::string to_ini(const ExperimentConfig& cfg);
/// Applies one "section.key = value" override.
void apply_override(ExperimentConfig& cfg, const std::string& key, const std::string& value);

std::vector<std::string> preset_names();
/// Throws ConfigError for unknown names.
ExperimentConfig preset(const std::string& name);
/// The row set of the condition-number table at (10,20).
std::vector<std::string> condition_presets();

// ---------------------------------------------------------------------------
// Artifacts

/// Row-major N x dx matrix with an 8-byte magic, u32 version, u64 N, u64 dx.
void write_dataset(const std::string& path, const Matrix& data);
Matrix read_dataset(const std::string& path);

/// Named tensors, written as a binary file plus a text manifest at path + ".manifest".
using TensorList = std::vector<std::pair<std::string, Matrix>>;
void write_checkpoint(const std::string& path, const TensorList& tensors);
TensorList read_checkpoint(const std::string& path);
const Matrix& find_tensor(const TensorList& tensors, const std::string& name);

void append_params(TensorList& out, const ad::ParamStore& store, const std::string& prefix);
void restore_params(ad::ParamStore& store, const TensorList& tensors, const std::string& prefix);
void append_kernel(TensorList& out, const KernelParams& k);
KernelParams restore_kernel(const TensorList& tensors);

struct GeneratedData {
  Matrix data;
  std::optional<LinearHVAE> linear_truth;
  std::unique_ptr<HVAELayerStack> nonlinear_truth;
};

/// Samples a ground-truth model and N observations. Writes data.bin and
/// truth.ckpt under `out_dir` when it is nonempty.
GeneratedData generate_data(const DatasetSpec& spec, const std::string& out_dir = "");
/// Generates synthetic data in memory or reads the dataset file.
GeneratedData load_or_generate(const DatasetSpec& spec);

std::unique_ptr<VariationalModel> build_model(const ExperimentConfig& cfg, std::size_t dx);

// ---------------------------------------------------------------------------
// Experiments

struct RunOutcome {
  TrainResult train;
  EvaluationReport report;
};

EvaluationReport evaluate_model(const ExperimentConfig& cfg, const VariationalModel& model,
                                const GeneratedData& data, const KernelParams& kernel);

/// Trains and writes metrics.csv, events.jsonl and model.ckpt under `out_dir`.
TrainResult train_experiment(const ExperimentConfig& cfg, const std::string& out_dir);
/// Loads model.ckpt from `out_dir` and writes evaluation.json.
EvaluationReport evaluate_experiment(const ExperimentConfig& cfg, const std::string& out_dir);
/// Generate-or-load, train, evaluate; also writes config.ini.
RunOutcome run_experiment(const ExperimentConfig& cfg, const std::string& out_dir);

struct SweepCell {
  std::string value;
  std::size_t seed_index = 0;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  EvaluationReport report;
};

struct SweepResult {
  std::vector<SweepCell> cells;
  std::vector<std::string> summary_rows;  // CSV lines, header first
};

/// One run per (value, seed); the summary CSV reports mean and sample std of
/// each metric over successful seeds. The axis "preset" swaps whole presets.
SweepResult sweep(const ExperimentConfig& base, const std::string& axis, const std::vector<std::string>& values,
                  const std::string& out_dir);

std::string to_string(DatasetSource s);
std::string to_string(ModelKind m);

}  // namespace speedvae
