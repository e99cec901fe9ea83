#include "speedvae/harness.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>

#include "speedvae/error.hpp"

namespace speedvae {

namespace fs = std::filesystem;

namespace {

static_assert(std::endian::native == std::endian::little, "artifact I/O assumes a little-endian host");

constexpr char kDatasetMagic[8] = {'S', 'V', 'A', 'E', 'D', 'A', 'T', 'A'};
constexpr char kCheckpointMagic[8] = {'S', 'V', 'A', 'E', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kFormatVersion = 1;

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

[[noreturn]] void config_error(int line, const std::string& msg) {
  if (line > 0) raise(ErrorCode::ConfigError, "line " + std::to_string(line) + ": " + msg);
  raise(ErrorCode::ConfigError, msg);
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Value parsers return nullopt on malformed input.

std::optional<std::uint64_t> parse_u64(const std::string& s) {
  std::uint64_t v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) return std::nullopt;
  return v;
}

std::optional<double> parse_f64(const std::string& s) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty() || !std::isfinite(v)) return std::nullopt;
  return v;
}

std::optional<bool> parse_bool(const std::string& s) {
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  return std::nullopt;
}

template <typename E>
using EnumTable = std::vector<std::pair<std::string_view, E>>;

template <typename E>
std::optional<E> parse_enum(const std::string& s, const EnumTable<E>& table) {
  for (const auto& [name, value] : table) {
    if (s == name) return value;
  }
  return std::nullopt;
}

template <typename E>
std::string enum_name(E v, const EnumTable<E>& table) {
  for (const auto& [name, value] : table) {
    if (v == value) return std::string(name);
  }
  return "?";
}

template <typename E>
std::string enum_choices(const EnumTable<E>& table) {
  std::string out;
  for (const auto& [name, value] : table) {
    if (!out.empty()) out += "|";
    out += name;
  }
  return out;
}

const EnumTable<DatasetSource> kSources = {{"synthetic-linear", DatasetSource::SyntheticLinear},
                                             {"synthetic-nonlinear", DatasetSource::SyntheticNonlinear},
                                             {"file", DatasetSource::File}};
const EnumTable<ModelKind> kModels = {
    {"linear-hvae", ModelKind::LinearHVAE}, {"hvae-stack", ModelKind::HVAEStack}, {"mlp", ModelKind::Mlp}};
const EnumTable<ObservationKind> kObservations = {{"gaussian", ObservationKind::Gaussian},
                                                    {"bernoulli", ObservationKind::Bernoulli}};
const EnumTable<KernelKind> kKernels = {{"mala", KernelKind::Mala}, {"hmc", KernelKind::Hmc}};
const EnumTable<TrainPreconditioner> kPreconditioners = {{"diagonal", TrainPreconditioner::Diagonal},
                                                           {"lower-triangular", TrainPreconditioner::LowerTriangular},
                                                           {"none", TrainPreconditioner::None}};
const EnumTable<AdaptationKind> kAdaptations = {{"speed-measure", AdaptationKind::SpeedMeasure},
                                                  {"dual-averaging", AdaptationKind::DualAveraging},
                                                  {"fixed", AdaptationKind::Fixed}};
const EnumTable<OptimizerKind> kOptimizers = {{"adam", OptimizerKind::Adam}, {"sgd", OptimizerKind::Sgd}};
const EnumTable<EntropyApprox> kEntropies = {{"local-gaussian", EntropyApprox::LocalGaussian},
                                               {"first-order", EntropyApprox::FirstOrder}};
const EnumTable<ProposalMode> kProposals = {{"encoder-mean", ProposalMode::EncoderMean},
                                              {"chain-mean", ProposalMode::ChainMean}};

/// One config key with a parser (returns false on a malformed value) and a printer.
struct Field {
  std::string key;
  std::string expected;
  std::function<bool(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

template <typename T>
Field size_field(std::string key, T ExperimentConfig::*group, std::size_t T::*member) {
  return {std::move(key), "non-negative integer",
          [group, member](ExperimentConfig& c, const std::string& s) {
            const auto v = parse_u64(s);
            if (!v) return false;
            c.*group.*member = static_cast<std::size_t>(*v);
            return true;
          },
          [group, member](const ExperimentConfig& c) { return std::to_string(c.*group.*member); }};
}

template <typename T>
Field u64_field(std::string key, T ExperimentConfig::*group, std::uint64_t T::*member) {
  return {std::move(key), "non-negative integer",
          [group, member](ExperimentConfig& c, const std::string& s) {
            const auto v = parse_u64(s);
            if (!v) return false;
            c.*group.*member = *v;
            return true;
          },
          [group, member](const ExperimentConfig& c) { return std::to_string(c.*group.*member); }};
}

template <typename T>
Field real_field(std::string key, T ExperimentConfig::*group, double T::*member) {
  return {std::move(key), "real number",
          [group, member](ExperimentConfig& c, const std::string& s) {
            const auto v = parse_f64(s);
            if (!v) return false;
            c.*group.*member = *v;
            return true;
          },
          [group, member](const ExperimentConfig& c) { return format_double(c.*group.*member); }};
}

template <typename T>
Field bool_field(std::string key, T ExperimentConfig::*group, bool T::*member) {
  return {std::move(key), "boolean",
          [group, member](ExperimentConfig& c, const std::string& s) {
            const auto v = parse_bool(s);
            if (!v) return false;
            c.*group.*member = *v;
            return true;
          },
          [group, member](const ExperimentConfig& c) { return std::string(c.*group.*member ? "true" : "false"); }};
}

template <typename T, typename E>
Field enum_field(std::string key, T ExperimentConfig::*group, E T::*member, const EnumTable<E>& table) {
  return {std::move(key), "one of " + enum_choices(table),
          [group, member, &table](ExperimentConfig& c, const std::string& s) {
            const auto v = parse_enum(s, table);
            if (!v) return false;
            c.*group.*member = *v;
            return true;
          },
          [group, member, &table](const ExperimentConfig& c) { return enum_name(c.*group.*member, table); }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    using C = ExperimentConfig;
    std::vector<Field> f;
    f.push_back({"experiment.name", "string",
                 [](C& c, const std::string& s) {
                   c.name = s;
                   return !s.empty();
                 },
                 [](const C& c) { return c.name; }});
    f.push_back({"experiment.out_dir", "path",
                 [](C& c, const std::string& s) {
                   c.out_dir = s;
                   return !s.empty();
                 },
                 [](const C& c) { return c.out_dir; }});
    f.push_back({"experiment.seeds", "positive integer",
                 [](C& c, const std::string& s) {
                   const auto v = parse_u64(s);
                   if (!v || *v == 0) return false;
                   c.seeds = static_cast<std::size_t>(*v);
                   return true;
                 },
                 [](const C& c) { return std::to_string(c.seeds); }});
    f.push_back({"experiment.slow", "boolean",
                 [](C& c, const std::string& s) {
                   const auto v = parse_bool(s);
                   if (!v) return false;
                   c.slow = *v;
                   return true;
                 },
                 [](const C& c) { return std::string(c.slow ? "true" : "false"); }});

    f.push_back(enum_field("dataset.source", &C::dataset, &DatasetSpec::source, kSources));
    f.push_back(size_field("dataset.n1", &C::dataset, &DatasetSpec::n1));
    f.push_back(size_field("dataset.n2", &C::dataset, &DatasetSpec::n2));
    f.push_back(size_field("dataset.dx", &C::dataset, &DatasetSpec::dx));
    f.push_back(size_field("dataset.N", &C::dataset, &DatasetSpec::N));
    f.push_back(real_field("dataset.obs_sigma", &C::dataset, &DatasetSpec::obs_sigma));
    f.push_back(u64_field("dataset.gen_seed", &C::dataset, &DatasetSpec::gen_seed));
    f.push_back(size_field("dataset.hidden", &C::dataset, &DatasetSpec::hidden));
    f.push_back({"dataset.path", "path",
                 [](C& c, const std::string& s) {
                   c.dataset.path = s;
                   return true;
                 },
                 [](const C& c) { return c.dataset.path; }});

    f.push_back(enum_field("model.kind", &C::model, &ModelSpec::kind, kModels));
    f.push_back(size_field("model.n1", &C::model, &ModelSpec::n1));
    f.push_back(size_field("model.n2", &C::model, &ModelSpec::n2));
    f.push_back(size_field("model.hidden", &C::model, &ModelSpec::hidden));
    f.push_back(enum_field("model.observation", &C::model, &ModelSpec::observation, kObservations));
    f.push_back(real_field("model.obs_sigma", &C::model, &ModelSpec::obs_sigma));

    f.push_back(real_field("train.lr_phi0", &C::train, &TrainConfig::lr_phi0));
    f.push_back(real_field("train.lr_phi1", &C::train, &TrainConfig::lr_phi1));
    f.push_back(real_field("train.lr_theta", &C::train, &TrainConfig::lr_theta));
    f.push_back(real_field("train.lr_beta", &C::train, &TrainConfig::lr_beta));
    f.push_back(size_field("train.K", &C::train, &TrainConfig::K));
    f.push_back({"train.leapfrog_L", "positive integer",
                 [](C& c, const std::string& s) {
                   const auto v = parse_u64(s);
                   if (!v || *v == 0 || *v > 1000) return false;
                   c.train.leapfrog_L = static_cast<int>(*v);
                   return true;
                 },
                 [](const C& c) { return std::to_string(c.train.leapfrog_L); }});
    f.push_back(size_field("train.pretrain_epochs", &C::train, &TrainConfig::pretrain_epochs));
    f.push_back(size_field("train.mcmc_epochs", &C::train, &TrainConfig::mcmc_epochs));
    f.push_back(size_field("train.batch_size", &C::train, &TrainConfig::batch_size));
    f.push_back({"train.alpha_star", "real number or auto",
                 [](C& c, const std::string& s) {
                   if (s == "auto") {
                     c.train.alpha_star = -1.0;
                     return true;
                   }
                   const auto v = parse_f64(s);
                   if (!v) return false;
                   c.train.alpha_star = *v;
                   return true;
                 },
                 [](const C& c) { return c.train.alpha_star < 0 ? std::string("auto") : format_double(c.train.alpha_star); }});
    f.push_back(u64_field("train.seed", &C::train, &TrainConfig::seed));
    f.push_back(enum_field("train.kernel", &C::train, &TrainConfig::kernel, kKernels));
    f.push_back(enum_field("train.preconditioner", &C::train, &TrainConfig::preconditioner, kPreconditioners));
    f.push_back(enum_field("train.adaptation", &C::train, &TrainConfig::adaptation, kAdaptations));
    f.push_back(enum_field("train.optimizer", &C::train, &TrainConfig::optimizer, kOptimizers));
    f.push_back(enum_field("train.entropy", &C::train, &TrainConfig::entropy, kEntropies));
    f.push_back({"train.init_log_scale", "real number or auto",
                 [](C& c, const std::string& s) {
                   if (s == "auto") {
                     c.train.init_log_scale.reset();
                     return true;
                   }
                   const auto v = parse_f64(s);
                   if (!v) return false;
                   c.train.init_log_scale = *v;
                   return true;
                 },
                 [](const C& c) {
                   return c.train.init_log_scale ? format_double(*c.train.init_log_scale) : std::string("auto");
                 }});
    f.push_back(bool_field("train.freeze_prior_during_mcmc", &C::train, &TrainConfig::freeze_prior_during_mcmc));
    f.push_back(size_field("train.metrics_every", &C::train, &TrainConfig::metrics_every));

    f.push_back(size_field("evaluation.S", &C::eval, &ISConfig::S));
    f.push_back(real_field("evaluation.tau", &C::eval, &ISConfig::tau));
    f.push_back(enum_field("evaluation.proposal", &C::eval, &ISConfig::proposal_mode, kProposals));
    f.push_back(size_field("evaluation.chain_K", &C::eval, &ISConfig::chain_K));
    f.push_back({"evaluation.rows", "non-negative integer",
                 [](C& c, const std::string& s) {
                   const auto v = parse_u64(s);
                   if (!v) return false;
                   c.eval_rows = static_cast<std::size_t>(*v);
                   return true;
                 },
                 [](const C& c) { return std::to_string(c.eval_rows); }});
    return f;
  }();
  return table;
}

const Field* find_field(const std::string& key) {
  for (const Field& f : fields()) {
    if (f.key == key) return &f;
  }
  return nullptr;
}

void set_field(ExperimentConfig& cfg, const std::string& key, const std::string& value, int line) {
  const Field* f = find_field(key);
  if (f == nullptr) config_error(line, "unknown key '" + key + "'");
  if (!f->set(cfg, value)) config_error(line, "key '" + key + "': expected " + f->expected + ", got '" + value + "'");
}

// Binary helpers ------------------------------------------------------------

template <typename T>
void put(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, const std::string& path) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) raise(ErrorCode::IoError, path + ": truncated file");
  return v;
}

std::ofstream open_out(const std::string& path, bool binary) {
  std::ofstream os(path, binary ? std::ios::binary | std::ios::trunc : std::ios::trunc);
  if (!os) raise(ErrorCode::IoError, "cannot open '" + path + "' for writing");
  return os;
}

std::ifstream open_in(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) raise(ErrorCode::IoError, "cannot open '" + path + "' for reading");
  return is;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream os = open_out(path, false);
  os << text;
  if (!os) raise(ErrorCode::IoError, "write failed for '" + path + "'");
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) raise(ErrorCode::IoError, "cannot create directory '" + dir + "': " + ec.message());
}

std::string join(const std::string& dir, const std::string& file) { return (fs::path(dir) / file).string(); }

std::string sanitize(const std::string& s) {
  std::string out;
  for (char ch : s) out += (std::isalnum(static_cast<unsigned char>(ch)) || ch == '-' || ch == '.') ? ch : '_';
  return out.empty() ? "_" : out;
}

}  // namespace

// ---------------------------------------------------------------------------
// IniDocument

IniDocument IniDocument::parse(std::string_view text) {
  IniDocument doc;
  std::string section;
  int line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t end = std::min(text.find('\n', pos), text.size());
    std::string line = trim(text.substr(pos, end - pos));
    pos = end + 1;
    ++line_no;
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    if (line.front() == '[') {
      if (line.back() != ']') config_error(line_no, "malformed section header '" + line + "'");
      section = trim(std::string_view(line).substr(1, line.size() - 2));
      if (section.empty()) config_error(line_no, "empty section name");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) config_error(line_no, "expected 'key = value', got '" + line + "'");
    const std::string key = trim(std::string_view(line).substr(0, eq));
    std::string value = trim(std::string_view(line).substr(eq + 1));
    for (const char* marker : {" #", " ;", "\t#", "\t;"}) {
      const auto c = value.find(marker);
      if (c != std::string::npos) value = trim(std::string_view(value).substr(0, c));
    }
    if (key.empty()) config_error(line_no, "missing key before '='");
    const std::string full = section.empty() ? key : section + "." + key;
    if (doc.entries_.count(full) != 0) config_error(line_no, "duplicate key '" + full + "'");
    doc.entries_[full] = {value, line_no};
  }
  return doc;
}

IniDocument IniDocument::load(const std::string& path) {
  std::ifstream is = open_in(path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse(ss.str());
}

void IniDocument::set(const std::string& key, const std::string& value) { entries_[key] = {value, 0}; }

// ---------------------------------------------------------------------------
// ExperimentConfig

void ExperimentConfig::validate() const {
  train.validate();
  eval.validate();
  auto check = [](bool ok, const std::string& msg) {
    if (!ok) raise(ErrorCode::ConfigError, msg);
  };
  check(seeds >= 1, "experiment.seeds must be >= 1");
  check(dataset.obs_sigma > 0.0, "dataset.obs_sigma must be positive");
  check(model.obs_sigma > 0.0, "model.obs_sigma must be positive");
  if (dataset.source == DatasetSource::File) {
    check(!dataset.path.empty(), "dataset.path is required when dataset.source = file");
  } else {
    check(dataset.n1 >= 1 && dataset.n2 >= 1 && dataset.dx >= 1, "dataset dims must be positive");
    check(dataset.hidden >= 1, "dataset.hidden must be positive");
  }
  check(model.n1 >= 1 && model.hidden >= 1, "model dims must be positive");
  if (model.kind != ModelKind::Mlp) check(model.n2 >= 1, "model.n2 must be positive");
  if (model.kind == ModelKind::LinearHVAE) {
    check(model.observation == ObservationKind::Gaussian, "linear-hvae requires gaussian observations");
    if (dataset.source == DatasetSource::SyntheticLinear) {
      check(model.n1 == dataset.n1 && model.n2 == dataset.n2, "model dims must match dataset dims for linear-hvae");
    }
  }
  if (eval.proposal_mode == ProposalMode::ChainMean) {
    check(train.uses_mcmc(), "evaluation.proposal = chain-mean requires an MCMC kernel");
  }
}

ExperimentConfig parse_experiment_config(const IniDocument& doc, ExperimentConfig base) {
  for (const auto& [key, entry] : doc.entries()) set_field(base, key, entry.value, entry.line);
  base.validate();
  return base;
}

ExperimentConfig load_experiment_config(const std::string& path) {
  return parse_experiment_config(IniDocument::load(path));
}

std::string to_ini(const ExperimentConfig& cfg) {
  std::string out;
  std::string section;
  for (const Field& f : fields()) {
    const auto dot = f.key.find('.');
    const std::string sec = f.key.substr(0, dot);
    if (sec != section) {
      if (!out.empty()) out += "\n";
      out += "[" + sec + "]\n";
      section = sec;
    }
    out += f.key.substr(dot + 1) + " = " + f.get(cfg) + "\n";
  }
  return out;
}

void apply_override(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  set_field(cfg, key, value, 0);
}

// ---------------------------------------------------------------------------
// Presets

namespace {

ExperimentConfig linear_base(std::size_t n1, std::size_t n2) {
  ExperimentConfig c;
  c.dataset.source = DatasetSource::SyntheticLinear;
  c.dataset.n1 = n1;
  c.dataset.n2 = n2;
  c.dataset.N = 1000;
  c.dataset.obs_sigma = 0.5;
  c.model.kind = ModelKind::LinearHVAE;
  c.model.n1 = n1;
  c.model.n2 = n2;
  c.model.obs_sigma = 0.5;
  c.train.lr_phi0 = c.train.lr_phi1 = c.train.lr_theta = 1e-3;
  c.train.batch_size = 20;
  c.train.leapfrog_L = 5;
  c.train.metrics_every = 10;
  c.eval_rows = 200;
  c.seeds = 3;
  if (n1 == 10) {
    c.dataset.dx = 100;
    c.train.K = 2;
    c.train.pretrain_epochs = 100;
    c.train.mcmc_epochs = 100;
  } else {
    c.dataset.dx = 300;
    c.train.K = 10;
    c.train.pretrain_epochs = 250;
    c.train.mcmc_epochs = 250;
    c.slow = true;
  }
  return c;
}

void set_variant(ExperimentConfig& c, const std::string& variant) {
  if (variant == "hvae") {
    c.train.preconditioner = TrainPreconditioner::None;
    c.train.adaptation = AdaptationKind::Fixed;
    return;
  }
  const auto dash = variant.find('-');
  const std::string pc = variant.substr(0, dash);
  const std::string kernel = variant.substr(dash + 1);
  c.train.kernel = kernel == "hmc" ? KernelKind::Hmc : KernelKind::Mala;
  if (pc == "lt") {
    c.train.preconditioner = TrainPreconditioner::LowerTriangular;
    c.train.adaptation = AdaptationKind::SpeedMeasure;
  } else if (pc == "d") {
    c.train.preconditioner = TrainPreconditioner::Diagonal;
    c.train.adaptation = AdaptationKind::SpeedMeasure;
  } else {
    c.train.preconditioner = TrainPreconditioner::Diagonal;
    c.train.adaptation = AdaptationKind::DualAveraging;
  }
}

const std::vector<std::string>& linear_variants() {
  static const std::vector<std::string> v = {"hvae", "d-mala", "ds-mala", "d-hmc", "ds-hmc", "lt-mala", "lt-hmc"};
  return v;
}

}  // namespace

std::vector<std::string> preset_names() {
  std::vector<std::string> names;
  for (const char* scale : {"linear-10-20-", "linear-50-100-"}) {
    for (const auto& v : linear_variants()) names.push_back(scale + v);
  }
  names.emplace_back("nonlinear-5-10");
  return names;
}

std::vector<std::string> condition_presets() {
  std::vector<std::string> names;
  for (const auto& v : linear_variants()) names.push_back("linear-10-20-" + v);
  return names;
}

ExperimentConfig preset(const std::string& name) {
  for (const auto& [prefix, n1, n2] : {std::tuple{"linear-10-20-", 10, 20}, std::tuple{"linear-50-100-", 50, 100}}) {
    const std::string p = prefix;
    if (name.rfind(p, 0) != 0) continue;
    const std::string variant = name.substr(p.size());
    if (std::find(linear_variants().begin(), linear_variants().end(), variant) == linear_variants().end()) break;
    ExperimentConfig c = linear_base(static_cast<std::size_t>(n1), static_cast<std::size_t>(n2));
    set_variant(c, variant);
    c.name = name;
    c.out_dir = "out/" + name;
    c.validate();
    return c;
  }
  if (name == "nonlinear-5-10") {
    ExperimentConfig c;
    c.name = name;
    c.out_dir = "out/" + name;
    c.seeds = 1;
    c.dataset.source = DatasetSource::SyntheticNonlinear;
    c.dataset.n1 = 5;
    c.dataset.n2 = 10;
    c.dataset.dx = 20;
    c.dataset.N = 500;
    c.dataset.hidden = 16;
    c.dataset.obs_sigma = 0.5;
    c.model.kind = ModelKind::HVAEStack;
    c.model.n1 = 5;
    c.model.n2 = 10;
    c.model.hidden = 16;
    c.model.obs_sigma = 0.5;
    c.train.lr_phi0 = c.train.lr_phi1 = c.train.lr_theta = 1e-3;
    c.train.K = 2;
    c.train.leapfrog_L = 5;
    c.train.kernel = KernelKind::Hmc;
    c.train.preconditioner = TrainPreconditioner::LowerTriangular;
    c.train.pretrain_epochs = 19;
    c.train.mcmc_epochs = 1;
    c.train.batch_size = 20;
    c.train.freeze_prior_during_mcmc = true;
    c.eval.S = 200;
    c.eval_rows = 100;
    c.validate();
    return c;
  }
  raise(ErrorCode::ConfigError, "unknown preset '" + name + "'");
}

// ---------------------------------------------------------------------------
// Dataset and checkpoint files

void write_dataset(const std::string& path, const Matrix& data) {
  std::ofstream os = open_out(path, true);
  os.write(kDatasetMagic, sizeof kDatasetMagic);
  put<std::uint32_t>(os, kFormatVersion);
  put<std::uint64_t>(os, static_cast<std::uint64_t>(data.rows()));
  put<std::uint64_t>(os, static_cast<std::uint64_t>(data.cols()));
  for (Eigen::Index i = 0; i < data.rows(); ++i) {
    for (Eigen::Index j = 0; j < data.cols(); ++j) put<double>(os, data(i, j));
  }
  if (!os) raise(ErrorCode::IoError, "write failed for '" + path + "'");
}

Matrix read_dataset(const std::string& path) {
  std::ifstream is = open_in(path);
  char magic[8];
  if (!is.read(magic, sizeof magic) || std::memcmp(magic, kDatasetMagic, sizeof magic) != 0) {
    raise(ErrorCode::IoError, path + ": not a dataset file");
  }
  if (get<std::uint32_t>(is, path) != kFormatVersion) raise(ErrorCode::IoError, path + ": unsupported version");
  const auto n = get<std::uint64_t>(is, path);
  const auto dx = get<std::uint64_t>(is, path);
  is.seekg(0, std::ios::end);
  const auto body = static_cast<std::uint64_t>(is.tellg()) - 28;
  if (dx != 0 && body / 8 / dx != n) raise(ErrorCode::IoError, path + ": body length does not match header");
  if (body != n * dx * 8) raise(ErrorCode::IoError, path + ": body length does not match header");
  is.seekg(28);
  Matrix data(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dx));
  for (Eigen::Index i = 0; i < data.rows(); ++i) {
    for (Eigen::Index j = 0; j < data.cols(); ++j) data(i, j) = get<double>(is, path);
  }
  return data;
}

void write_checkpoint(const std::string& path, const TensorList& tensors) {
  std::ofstream os = open_out(path, true);
  std::string manifest;
  os.write(kCheckpointMagic, sizeof kCheckpointMagic);
  put<std::uint32_t>(os, kFormatVersion);
  put<std::uint64_t>(os, tensors.size());
  for (const auto& [name, m] : tensors) {
    put<std::uint64_t>(os, name.size());
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint64_t>(os, static_cast<std::uint64_t>(m.rows()));
    put<std::uint64_t>(os, static_cast<std::uint64_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      for (Eigen::Index j = 0; j < m.cols(); ++j) put<double>(os, m(i, j));
    }
    manifest += name + " " + std::to_string(m.rows()) + " " + std::to_string(m.cols()) + "\n";
  }
  if (!os) raise(ErrorCode::IoError, "write failed for '" + path + "'");
  write_text(path + ".manifest", manifest);
}

TensorList read_checkpoint(const std::string& path) {
  std::ifstream is = open_in(path);
  char magic[8];
  if (!is.read(magic, sizeof magic) || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) {
    raise(ErrorCode::IoError, path + ": not a checkpoint file");
  }
  if (get<std::uint32_t>(is, path) != kFormatVersion) raise(ErrorCode::IoError, path + ": unsupported version");
  const auto count = get<std::uint64_t>(is, path);
  TensorList out;
  for (std::uint64_t t = 0; t < count; ++t) {
    const auto len = get<std::uint64_t>(is, path);
    if (len > 4096) raise(ErrorCode::IoError, path + ": corrupt tensor name");
    std::string name(len, '\0');
    if (!is.read(name.data(), static_cast<std::streamsize>(len))) raise(ErrorCode::IoError, path + ": truncated file");
    const auto rows = get<std::uint64_t>(is, path);
    const auto cols = get<std::uint64_t>(is, path);
    if (rows > (1u << 24) || cols > (1u << 24)) raise(ErrorCode::IoError, path + ": corrupt tensor shape");
    Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = get<double>(is, path);
    }
    out.emplace_back(std::move(name), std::move(m));
  }
  return out;
}

const Matrix& find_tensor(const TensorList& tensors, const std::string& name) {
  for (const auto& [n, m] : tensors) {
    if (n == name) return m;
  }
  raise(ErrorCode::IoError, "checkpoint has no tensor '" + name + "'");
}

void append_params(TensorList& out, const ad::ParamStore& store, const std::string& prefix) {
  for (const auto& e : store.entries()) out.emplace_back(prefix + e.name, e.value);
}

void restore_params(ad::ParamStore& store, const TensorList& tensors, const std::string& prefix) {
  for (auto& e : store.entries()) {
    const Matrix& m = find_tensor(tensors, prefix + e.name);
    if (m.rows() != e.value.rows() || m.cols() != e.value.cols()) {
      raise(ErrorCode::ShapeMismatch, "checkpoint tensor '" + prefix + e.name + "' has the wrong shape");
    }
    e.value = m;
  }
}

void append_kernel(TensorList& out, const KernelParams& k) {
  Matrix info(8, 1);
  info << static_cast<double>(k.kind == KernelKind::Hmc), static_cast<double>(k.precond == PreconditionerKind::LowerTriangular),
      static_cast<double>(k.dim()), static_cast<double>(k.leapfrog_steps), k.log_h, k.beta, k.target_accept,
      static_cast<double>(k.entropy == EntropyApprox::FirstOrder);
  out.emplace_back("kernel.info", info);
  out.emplace_back("kernel.packed", Matrix(k.packed()));
}

KernelParams restore_kernel(const TensorList& tensors) {
  const Matrix& info = find_tensor(tensors, "kernel.info");
  if (info.size() != 8) raise(ErrorCode::IoError, "kernel.info has the wrong size");
  const auto pc = info(1) != 0.0 ? PreconditionerKind::LowerTriangular : PreconditionerKind::Diagonal;
  const auto dim = static_cast<std::size_t>(info(2));
  KernelParams k = info(0) != 0.0 ? KernelParams::hmc(dim, pc, static_cast<int>(info(3)))
                                  : KernelParams::mala(dim, pc);
  const Matrix& packed = find_tensor(tensors, "kernel.packed");
  if (static_cast<std::size_t>(packed.size()) != k.packed_size()) raise(ErrorCode::IoError, "kernel.packed has the wrong size");
  k.set_packed(packed.col(0));
  k.log_h = info(4);
  k.beta = info(5);
  k.target_accept = info(6);
  k.entropy = info(7) != 0.0 ? EntropyApprox::FirstOrder : EntropyApprox::LocalGaussian;
  k.validate();
  return k;
}

// ---------------------------------------------------------------------------
// Data and models

GeneratedData generate_data(const DatasetSpec& spec, const std::string& out_dir) {
  if (spec.source == DatasetSource::File) raise(ErrorCode::ConfigError, "generate_data needs a synthetic dataset spec");
  RngStream rng(spec.gen_seed, 1);
  GeneratedData g;
  g.data.resize(static_cast<Eigen::Index>(spec.N), static_cast<Eigen::Index>(spec.dx));
  TensorList truth;
  if (spec.source == DatasetSource::SyntheticLinear) {
    g.linear_truth = LinearHVAE::random(spec.n1, spec.n2, spec.dx, spec.obs_sigma, rng);
    for (Eigen::Index i = 0; i < g.data.rows(); ++i) g.data.row(i) = g.linear_truth->sample_observation(rng).transpose();
    append_params(truth, g.linear_truth->params(), "truth.");
    truth.emplace_back("truth.obs_log_sigma", Matrix(g.linear_truth->obs_log_sigma()));
  } else {
    g.nonlinear_truth = std::make_unique<HVAELayerStack>(spec.n1, spec.n2, spec.dx, spec.hidden,
                                                         ObservationKind::Gaussian, spec.obs_sigma, rng);
    for (Eigen::Index i = 0; i < g.data.rows(); ++i) {
      g.data.row(i) = g.nonlinear_truth->sample_observation(rng).transpose();
    }
    append_params(truth, g.nonlinear_truth->theta(), "truth.");
  }
  if (!out_dir.empty()) {
    ensure_dir(out_dir);
    write_dataset(join(out_dir, "data.bin"), g.data);
    write_checkpoint(join(out_dir, "truth.ckpt"), truth);
  }
  return g;
}

GeneratedData load_or_generate(const DatasetSpec& spec) {
  if (spec.source != DatasetSource::File) return generate_data(spec);
  GeneratedData g;
  g.data = read_dataset(spec.path);
  return g;
}

std::unique_ptr<VariationalModel> build_model(const ExperimentConfig& cfg, std::size_t dx) {
  RngStream init(cfg.train.seed, 2);
  const ModelSpec& m = cfg.model;
  switch (m.kind) {
    case ModelKind::LinearHVAE: {
      LinearHVAE gen = LinearHVAE::random(m.n1, m.n2, dx, m.obs_sigma, init);
      LinearEncoder enc = LinearEncoder::random(m.n1, m.n2, dx, init);
      return std::make_unique<LinearVAE>(std::move(gen), std::move(enc));
    }
    case ModelKind::HVAEStack:
      return std::make_unique<HVAELayerStack>(m.n1, m.n2, dx, m.hidden, m.observation, m.obs_sigma, init);
    case ModelKind::Mlp:
      return std::make_unique<MlpVAE>(m.n1, dx, m.hidden, m.observation, m.obs_sigma, init);
  }
  raise(ErrorCode::ConfigError, "unknown model kind");
}

// ---------------------------------------------------------------------------
// Experiments

namespace {

TensorList model_tensors(const VariationalModel& model, const KernelParams& kernel, bool with_kernel) {
  TensorList t;
  append_params(t, model.theta(), "theta.");
  append_params(t, model.phi0(), "phi0.");
  if (with_kernel) append_kernel(t, kernel);
  return t;
}

struct Trained {
  GeneratedData data;
  std::unique_ptr<VariationalModel> model;
  TrainResult result;
};

Trained train_in_memory(const ExperimentConfig& cfg, const std::string& dataset_dir) {
  Trained t;
  t.data = cfg.dataset.source == DatasetSource::File ? load_or_generate(cfg.dataset)
                                                     : generate_data(cfg.dataset, dataset_dir);
  if (t.data.data.rows() == 0) raise(ErrorCode::InvalidArgument, "dataset is empty");
  t.model = build_model(cfg, static_cast<std::size_t>(t.data.data.cols()));
  MetricsHooks hooks;
  if (t.data.linear_truth && cfg.model.kind == ModelKind::LinearHVAE &&
      t.data.linear_truth->latent_dim() == t.model->latent_dim()) {
    hooks.truth = &*t.data.linear_truth;
  }
  t.result = train(*t.model, t.data.data, cfg.train, hooks);
  return t;
}

void write_training_outputs(const Trained& t, const ExperimentConfig& cfg, const std::string& out_dir) {
  write_metrics_csv(join(out_dir, "metrics.csv"), t.result.metrics);
  write_events_jsonl(join(out_dir, "events.jsonl"), t.result.state.events);
  write_checkpoint(join(out_dir, "model.ckpt"), model_tensors(*t.model, t.result.kernel, cfg.train.uses_mcmc()));
}

}  // namespace

EvaluationReport evaluate_model(const ExperimentConfig& cfg, const VariationalModel& model, const GeneratedData& data,
                                const KernelParams& kernel) {
  EvaluationReport r;
  r.dataset = to_string(cfg.dataset.source);
  r.model = to_string(cfg.model.kind);
  const bool mcmc = cfg.train.uses_mcmc();
  r.kernel = mcmc ? to_string(cfg.train.kernel) : "none";
  r.adaptation = mcmc ? to_string(cfg.train.adaptation) : "none";
  r.S = cfg.eval.S;
  r.tau = cfg.eval.tau;
  r.seed = cfg.train.seed;

  const Eigen::Index total = data.data.rows();
  const Eigen::Index rows = cfg.eval_rows == 0 ? total : std::min<Eigen::Index>(total, static_cast<Eigen::Index>(cfg.eval_rows));
  const RngStream root(cfg.train.seed, 0x15);
  double sum = 0.0;
  for (Eigen::Index i = 0; i < rows; ++i) {
    RngStream rng = root.derive(static_cast<std::uint64_t>(i));
    sum += importance_sampling_loglik(model, data.data.row(i).transpose(), cfg.eval, rng, mcmc ? &kernel : nullptr);
  }
  r.is_loglik_mean = rows > 0 ? sum / static_cast<double>(rows) : 0.0;

  if (const auto* lin = dynamic_cast<const LinearVAE*>(&model)) {
    Matrix c;
    if (mcmc) c = kernel.preconditioner();
    const ConditionDiagnostics d = condition_diagnostics(lin->generator(), mcmc ? &c : nullptr);
    r.kappa_raw = d.kappa_raw;
    r.kappa_transformed = d.kappa_transformed;
    if (mcmc && cfg.train.adaptation == AdaptationKind::DualAveraging) r.kappa_transformed = d.kappa_raw;
    if (data.linear_truth && data.linear_truth->latent_dim() == lin->latent_dim()) {
      const LoglikGap gap = loglik_gap(*data.linear_truth, lin->generator(), data.data);
      r.gap_mean = gap.mean;
      r.gap_abs = gap.abs;
    }
  }
  return r;
}

TrainResult train_experiment(const ExperimentConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  ensure_dir(out_dir);
  Trained t = train_in_memory(cfg, "");
  write_training_outputs(t, cfg, out_dir);
  return std::move(t.result);
}

EvaluationReport evaluate_experiment(const ExperimentConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  const GeneratedData data = load_or_generate(cfg.dataset);
  std::unique_ptr<VariationalModel> model = build_model(cfg, static_cast<std::size_t>(data.data.cols()));
  const TensorList ckpt = read_checkpoint(join(out_dir, "model.ckpt"));
  restore_params(model->theta(), ckpt, "theta.");
  restore_params(model->phi0(), ckpt, "phi0.");
  const KernelParams kernel = cfg.train.uses_mcmc() ? restore_kernel(ckpt) : KernelParams{};
  const EvaluationReport r = evaluate_model(cfg, *model, data, kernel);
  write_text(join(out_dir, "evaluation.json"), r.to_json() + "\n");
  return r;
}

RunOutcome run_experiment(const ExperimentConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  ensure_dir(out_dir);
  write_text(join(out_dir, "config.ini"), to_ini(cfg));
  Trained t = train_in_memory(cfg, out_dir);
  write_training_outputs(t, cfg, out_dir);
  RunOutcome out;
  out.report = evaluate_model(cfg, *t.model, t.data, t.result.kernel);
  write_text(join(out_dir, "evaluation.json"), out.report.to_json() + "\n");
  out.train = std::move(t.result);
  return out;
}

// ---------------------------------------------------------------------------
// Sweeps

namespace {

struct Stat {
  std::vector<double> values;
  void add(const std::optional<double>& v) {
    if (v) values.push_back(*v);
  }
  std::string mean() const {
    if (values.empty()) return "";
    double s = 0.0;
    for (double v : values) s += v;
    return format_double(s / static_cast<double>(values.size()));
  }
  std::string sd() const {
    if (values.size() < 2) return "";
    double s = 0.0;
    for (double v : values) s += v;
    const double m = s / static_cast<double>(values.size());
    double ss = 0.0;
    for (double v : values) ss += (v - m) * (v - m);
    return format_double(std::sqrt(ss / static_cast<double>(values.size() - 1)));
  }
};

}  // namespace

SweepResult sweep(const ExperimentConfig& base, const std::string& axis, const std::vector<std::string>& values,
                  const std::string& out_dir) {
  if (values.empty()) raise(ErrorCode::ConfigError, "sweep needs at least one value");
  std::vector<ExperimentConfig> configs;
  for (const std::string& v : values) {
    ExperimentConfig c = base;
    if (axis == "preset") {
      c = preset(v);
      c.seeds = base.seeds;
      c.train.seed = base.train.seed;
      c.dataset.gen_seed = base.dataset.gen_seed;
    } else {
      apply_override(c, axis, v);
    }
    c.validate();
    configs.push_back(std::move(c));
  }

  SweepResult result;
  ensure_dir(out_dir);
  result.summary_rows.push_back(
      "axis,value,seeds,failed,kappa_raw_mean,kappa_raw_std,kappa_transformed_mean,kappa_transformed_std,"
      "gap_mean_mean,gap_mean_std,gap_abs_mean,gap_abs_std,is_loglik_mean,is_loglik_std");
  for (std::size_t vi = 0; vi < values.size(); ++vi) {
    Stat kraw, ktr, gm, ga, is;
    std::size_t failed = 0;
    for (std::size_t s = 0; s < configs[vi].seeds; ++s) {
      ExperimentConfig c = configs[vi];
      c.train.seed = base.train.seed + s;
      c.dataset.gen_seed = base.dataset.gen_seed + s;
      SweepCell cell;
      cell.value = values[vi];
      cell.seed_index = s;
      cell.seed = c.train.seed;
      const std::string dir = join(join(out_dir, sanitize(values[vi])), "seed-" + std::to_string(s));
      try {
        cell.report = run_experiment(c, dir).report;
        cell.ok = true;
        kraw.add(cell.report.kappa_raw);
        ktr.add(cell.report.kappa_transformed);
        gm.add(cell.report.gap_mean);
        ga.add(cell.report.gap_abs);
        is.add(cell.report.is_loglik_mean);
      } catch (const Error& e) {
        cell.error = std::string(to_string(e.code())) + ": " + e.what();
        ++failed;
      }
      result.cells.push_back(std::move(cell));
    }
    std::string row = axis + "," + values[vi] + "," + std::to_string(configs[vi].seeds) + "," + std::to_string(failed);
    for (const Stat* st : {&kraw, &ktr, &gm, &ga, &is}) row += "," + st->mean() + "," + st->sd();
    result.summary_rows.push_back(std::move(row));
  }
  std::string text;
  for (const auto& r : result.summary_rows) text += r + "\n";
  write_text(join(out_dir, "summary.csv"), text);
  return result;
}

std::string to_string(DatasetSource s) { return enum_name(s, kSources); }
std::string to_string(ModelKind m) { return enum_name(m, kModels); }

}  // namespace speedvae
