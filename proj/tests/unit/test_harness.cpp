#include "speedvae/harness.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>

#include <gtest/gtest.h>

#include "speedvae/error.hpp"

using namespace speedvae;
namespace fs = std::filesystem;

namespace {

std::optional<std::string> config_error(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    if (e.code() == ErrorCode::ConfigError) return std::string(e.what());
    return "other: " + std::string(e.what());
  }
  return std::nullopt;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("speedvae_harness_" + name);
  fs::remove_all(p);
  return p;
}

ExperimentConfig tiny_config() {
  ExperimentConfig c;
  c.name = "tiny";
  c.dataset.n1 = c.model.n1 = 1;
  c.dataset.n2 = c.model.n2 = 2;
  c.dataset.dx = 5;
  c.dataset.N = 40;
  c.train.K = 1;
  c.train.pretrain_epochs = 2;
  c.train.mcmc_epochs = 1;
  c.train.batch_size = 10;
  c.train.metrics_every = 1;
  c.eval.S = 20;
  c.eval_rows = 10;
  return c;
}

}  // namespace

TEST(IniDocument, ParsesSectionsCommentsAndLines) {
  const IniDocument d = IniDocument::parse("# top\n[train]\nK = 3   # trailing\n\n[evaluation]\nS=50 ; note\n");
  ASSERT_TRUE(d.contains("train.K"));
  EXPECT_EQ(d.entries().at("train.K").value, "3");
  EXPECT_EQ(d.entries().at("train.K").line, 3);
  EXPECT_EQ(d.entries().at("evaluation.S").value, "50");
  EXPECT_EQ(d.entries().at("evaluation.S").line, 6);
}

TEST(IniDocument, SyntaxErrorsCarryLineNumbers) {
  auto e = config_error([] { IniDocument::parse("[train]\nK 3\n"); });
  ASSERT_TRUE(e);
  EXPECT_NE(e->find("line 2"), std::string::npos) << *e;
  e = config_error([] { IniDocument::parse("[train\n"); });
  ASSERT_TRUE(e);
  EXPECT_NE(e->find("line 1"), std::string::npos) << *e;
  e = config_error([] { IniDocument::parse("[train]\nK = 1\nK = 2\n"); });
  ASSERT_TRUE(e);
  EXPECT_NE(e->find("line 3"), std::string::npos) << *e;
  EXPECT_TRUE(config_error([] { IniDocument::load("/nonexistent/speedvae.ini"); }));
}

TEST(ExperimentConfigParse, UnknownKeyAndTypeMismatch) {
  auto e = config_error([] { parse_experiment_config(IniDocument::parse("[train]\nlearning_rate = 1\n")); });
  ASSERT_TRUE(e);
  EXPECT_NE(e->find("line 2"), std::string::npos);
  EXPECT_NE(e->find("learning_rate"), std::string::npos);

  e = config_error([] { parse_experiment_config(IniDocument::parse("[train]\n\nK = two\n")); });
  ASSERT_TRUE(e);
  EXPECT_NE(e->find("line 3"), std::string::npos);
  EXPECT_NE(e->find("'two'"), std::string::npos);

  EXPECT_TRUE(config_error([] { parse_experiment_config(IniDocument::parse("[train]\nkernel = nuts\n")); }));
  EXPECT_TRUE(config_error([] { parse_experiment_config(IniDocument::parse("[train]\nlr_theta = -1\n")); }));
  EXPECT_TRUE(config_error([] { parse_experiment_config(IniDocument::parse("[train]\nK = -2\n")); }));
}

TEST(ExperimentConfigParse, ReadsValuesOverBase) {
  const ExperimentConfig c = parse_experiment_config(IniDocument::parse(
      "[train]\nkernel = mala\npreconditioner = diagonal\nalpha_star = auto\nK = 4\n[evaluation]\ntau = 2\n"));
  EXPECT_EQ(c.train.kernel, KernelKind::Mala);
  EXPECT_EQ(c.train.preconditioner, TrainPreconditioner::Diagonal);
  EXPECT_EQ(c.train.K, 4u);
  EXPECT_LT(c.train.alpha_star, 0.0);
  EXPECT_DOUBLE_EQ(c.eval.tau, 2.0);
  EXPECT_EQ(c.dataset.dx, ExperimentConfig{}.dataset.dx);
}

TEST(ExperimentConfigParse, IniRoundTrip) {
  for (const std::string& name : preset_names()) {
    const ExperimentConfig a = preset(name);
    const ExperimentConfig b = parse_experiment_config(IniDocument::parse(to_ini(a)));
    EXPECT_EQ(to_ini(a), to_ini(b)) << name;
  }
  ExperimentConfig c = tiny_config();
  c.train.alpha_star = 0.7;
  c.train.init_log_scale = -1.25;
  c.dataset.obs_sigma = 0.1234567890123;
  EXPECT_EQ(to_ini(parse_experiment_config(IniDocument::parse(to_ini(c)))), to_ini(c));
}

TEST(ExperimentConfigParse, OverrideAppliesAndRejectsUnknown) {
  ExperimentConfig c;
  apply_override(c, "train.K", "7");
  EXPECT_EQ(c.train.K, 7u);
  EXPECT_TRUE(config_error([&] { apply_override(c, "train.nope", "1"); }));
}

TEST(Presets, AllValidate) {
  ASSERT_FALSE(preset_names().empty());
  for (const std::string& name : preset_names()) EXPECT_NO_THROW(preset(name).validate()) << name;
  EXPECT_EQ(condition_presets().size(), 7u);
  for (const std::string& name : condition_presets()) EXPECT_NO_THROW(preset(name));
  EXPECT_TRUE(config_error([] { preset("no-such-preset"); }));
}

TEST(Dataset, RoundTripsIncludingEmpty) {
  const fs::path dir = scratch("dataset");
  fs::create_directories(dir);
  Matrix m(3, 4);
  m << 1, 2, 3, 4, -1e300, 1e-300, 0.1, 7, 9, 8, 7, 6;
  write_dataset((dir / "a.bin").string(), m);
  EXPECT_EQ(read_dataset((dir / "a.bin").string()), m);
  const Matrix empty(0, 4);
  write_dataset((dir / "e.bin").string(), empty);
  const Matrix back = read_dataset((dir / "e.bin").string());
  EXPECT_EQ(back.rows(), 0);
  EXPECT_EQ(back.cols(), 4);
  EXPECT_EQ(fs::file_size(dir / "a.bin"), 8u + 4u + 8u + 8u + 12u * 8u);

  std::ofstream(dir / "bad.bin") << "not a dataset";
  EXPECT_THROW(read_dataset((dir / "bad.bin").string()), Error);
  EXPECT_THROW(read_dataset((dir / "missing.bin").string()), Error);
  fs::remove_all(dir);
}

TEST(Dataset, SameSeedGivesByteIdenticalFiles) {
  const fs::path a = scratch("gen_a"), b = scratch("gen_b"), c = scratch("gen_c");
  DatasetSpec spec;
  spec.n1 = 2;
  spec.n2 = 3;
  spec.dx = 8;
  spec.N = 50;
  generate_data(spec, a.string());
  generate_data(spec, b.string());
  spec.gen_seed = 2;
  generate_data(spec, c.string());
  EXPECT_EQ(slurp(a / "data.bin"), slurp(b / "data.bin"));
  EXPECT_EQ(slurp(a / "truth.ckpt"), slurp(b / "truth.ckpt"));
  EXPECT_NE(slurp(a / "data.bin"), slurp(c / "data.bin"));
  for (const fs::path& p : {a, b, c}) fs::remove_all(p);
}

TEST(Dataset, SampleCovarianceMatchesMarginal) {
  DatasetSpec spec;
  spec.n1 = 2;
  spec.n2 = 3;
  spec.dx = 6;
  spec.N = 40000;
  const GeneratedData g = generate_data(spec);
  ASSERT_TRUE(g.linear_truth);
  const GaussianMoments mm = g.linear_truth->marginal_moments();
  const Vector mean = g.data.colwise().mean().transpose();
  const Matrix centered = g.data.rowwise() - mean.transpose();
  const Matrix cov = centered.transpose() * centered / static_cast<double>(spec.N - 1);
  const double n = static_cast<double>(spec.N);
  for (Eigen::Index i = 0; i < 6; ++i) {
    EXPECT_NEAR(mean(i), mm.mean(i), 5.0 * std::sqrt(mm.cov(i, i) / n));
    for (Eigen::Index j = 0; j < 6; ++j) {
      const double se = std::sqrt((mm.cov(i, i) * mm.cov(j, j) + mm.cov(i, j) * mm.cov(i, j)) / n);
      EXPECT_NEAR(cov(i, j), mm.cov(i, j), 5.0 * se) << i << "," << j;
    }
  }
}

TEST(Checkpoint, RoundTripsTensorsAndKernel) {
  const fs::path dir = scratch("ckpt");
  fs::create_directories(dir);
  RngStream rng(3, 0);
  const LinearHVAE m = LinearHVAE::random(2, 3, 5, 0.5, rng);
  TensorList t;
  append_params(t, m.params(), "theta.");
  TrainConfig tc;
  KernelParams k = initial_kernel(tc, 5);
  k.log_h = -1.7;
  k.beta = 3.5;
  append_kernel(t, k);
  const std::string path = (dir / "m.ckpt").string();
  write_checkpoint(path, t);
  EXPECT_TRUE(fs::exists(path + ".manifest"));
  const TensorList back = read_checkpoint(path);
  ASSERT_EQ(back.size(), t.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    EXPECT_EQ(back[i].first, t[i].first);
    EXPECT_EQ(back[i].second, t[i].second);
  }
  LinearHVAE restored(2, 3, 5, 0.5);
  restore_params(restored.params(), back, "theta.");
  EXPECT_EQ(restored.W2z(), m.W2z());
  const KernelParams kb = restore_kernel(back);
  EXPECT_EQ(kb.kind, k.kind);
  EXPECT_EQ(kb.log_h, k.log_h);
  EXPECT_EQ(kb.beta, k.beta);
  EXPECT_EQ(kb.lower.packed(), k.lower.packed());
  EXPECT_THROW(find_tensor(back, "missing"), Error);
  fs::remove_all(dir);
}

TEST(Experiment, MalformedConfigLeavesNoOutputs) {
  const fs::path dir = scratch("malformed");
  ExperimentConfig c = tiny_config();
  c.train.batch_size = 0;
  EXPECT_TRUE(config_error([&] { run_experiment(c, dir.string()); }));
  EXPECT_FALSE(fs::exists(dir));
}

TEST(Experiment, RunWritesArtifactsAndIsIdempotent) {
  const fs::path a = scratch("run_a"), b = scratch("run_b");
  const ExperimentConfig c = tiny_config();
  const RunOutcome ra = run_experiment(c, a.string());
  run_experiment(c, b.string());
  for (const char* f : {"config.ini", "metrics.csv", "events.jsonl", "model.ckpt", "evaluation.json"}) {
    EXPECT_TRUE(fs::exists(a / f)) << f;
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  }
  EXPECT_TRUE(ra.report.kappa_raw);
  EXPECT_TRUE(ra.report.gap_mean);
  EXPECT_TRUE(std::isfinite(ra.report.is_loglik_mean));

  // Re-evaluating the stored checkpoint reproduces the report.
  EXPECT_EQ(evaluate_experiment(c, a.string()).to_json(), ra.report.to_json());
  const ExperimentConfig reread = load_experiment_config((a / "config.ini").string());
  EXPECT_EQ(to_ini(reread), to_ini(c));
  for (const fs::path& p : {a, b}) fs::remove_all(p);
}

TEST(Sweep, SummaryReportsMeanAndSampleStd) {
  const fs::path dir = scratch("sweep");
  ExperimentConfig c = tiny_config();
  c.seeds = 3;
  const SweepResult r = sweep(c, "train.K", {"1", "2"}, dir.string());
  ASSERT_EQ(r.cells.size(), 6u);
  ASSERT_EQ(r.summary_rows.size(), 3u);
  EXPECT_EQ(r.summary_rows[0].rfind("axis,value,seeds,failed,", 0), 0u) << r.summary_rows[0];
  EXPECT_TRUE(fs::exists(dir / "summary.csv"));
  EXPECT_TRUE(fs::exists(dir / "1" / "seed-0" / "evaluation.json"));

  // Recompute the K=1 kappa_raw statistics from the cells.
  double sum = 0.0, sum2 = 0.0;
  for (const SweepCell& cell : r.cells) {
    if (cell.value != "1") continue;
    ASSERT_TRUE(cell.ok) << cell.error;
    sum += *cell.report.kappa_raw;
  }
  const double mean = sum / 3.0;
  for (const SweepCell& cell : r.cells) {
    if (cell.value == "1") sum2 += std::pow(*cell.report.kappa_raw - mean, 2);
  }
  const double sd = std::sqrt(sum2 / 2.0);

  std::vector<std::string> header, row;
  auto split = [](const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(item);
    return out;
  };
  header = split(r.summary_rows[0]);
  row = split(r.summary_rows[1]);
  ASSERT_EQ(header.size(), row.size());
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == "kappa_raw_mean") EXPECT_NEAR(std::stod(row[i]), mean, 1e-6 * mean);
    if (header[i] == "kappa_raw_std") EXPECT_NEAR(std::stod(row[i]), sd, 1e-6 * std::max(sd, 1.0));
    if (header[i] == "seeds") EXPECT_EQ(row[i], "3");
    if (header[i] == "failed") EXPECT_EQ(row[i], "0");
  }
  fs::remove_all(dir);
}
