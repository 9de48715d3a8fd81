// vilds: simulate | fit | eval

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "vilds/io.hpp"
#include "vilds/oracle.hpp"
#include "vilds/trainer.hpp"
#include "vilds/version.hpp"

using namespace vilds;
namespace fs = std::filesystem;

namespace {

enum ExitCode { kOk = 0, kUsage = 2, kIo = 3, kNumeric = 4, kOracle = 5 };

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct OracleError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create directory '" + dir.string() + "'");
}

// Options are recorded as given so a run can be replayed from its manifest.
// No timestamps or host data: the manifest itself must be reproducible.
void write_manifest(const fs::path& dir, const std::string& command, const CLI::App& sub,
                    const std::vector<std::string>& outputs, const json& notes = nullptr) {
  json opts = json::object();
  for (const CLI::Option* o : sub.get_options()) {
    if (o->get_name() == "--help") continue;
    std::string key = o->get_name();
    while (!key.empty() && key.front() == '-') key.erase(key.begin());
    if (o->get_expected_min() == 0)
      opts[key] = o->count() > 0;
    else
      opts[key] = o->count() > 0 ? json(o->as<std::string>()) : json(nullptr);
  }
  json j = {{"command", command}, {"version", kVersion}, {"options", opts}, {"outputs", outputs}};
  if (!notes.is_null()) j["notes"] = notes;
  write_json(dir / "manifest.json", j);
}

Dataset read_dataset(const fs::path& path) {
  Dataset d;
  d.x = read_matrix_csv(path);
  if (d.x.rows() < 1) throw IoError("'" + path.string() + "' has no data rows");
  return d;
}

MatrixXd stack_rows(const std::vector<VectorXd>& v) {
  MatrixXd M(static_cast<Index>(v.size()), v.empty() ? 0 : v.front().size());
  for (std::size_t t = 0; t < v.size(); ++t) M.row(static_cast<Index>(t)) = v[t].transpose();
  return M;
}

// One row per block, entries in row-major order.
MatrixXd flatten_blocks(const std::vector<MatrixXd>& blocks, Index n) {
  MatrixXd M(static_cast<Index>(blocks.size()), n * n);
  for (std::size_t t = 0; t < blocks.size(); ++t)
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < n; ++j) M(static_cast<Index>(t), i * n + j) = blocks[t](i, j);
  return M;
}

std::vector<std::string> block_header(const std::string& prefix, Index n) {
  std::vector<std::string> h;
  for (Index i = 1; i <= n; ++i)
    for (Index j = 1; j <= n; ++j) h.push_back(prefix + std::to_string(i) + "_" + std::to_string(j));
  return h;
}

// ---------------------------------------------------------------------------

struct SimulateArgs {
  std::string family;
  Index T = 0;
  Index n = 2;
  Index m = 5;
  std::uint64_t seed = 0;
  std::string out_dir;
  std::string theta;
};

void cmd_simulate(const SimulateArgs& a, const CLI::App& sub) {
  const Family family = parse_family(a.family);
  if (a.T < 1) throw UsageError("--T must be at least 1");
  GenerativeParams th;
  if (!a.theta.empty()) {
    th = load_theta(a.theta);
    if (th.family != family) throw UsageError("--theta holds a different family than --family");
  } else {
    if (family == Family::nonlin1d && (a.n != 1 || a.m != 1) &&
        (sub.count("--n") > 0 || sub.count("--m") > 0))
      throw UsageError("nonlin1d has n = m = 1");
    th = default_params(family, a.n, a.m, a.seed);
  }
  const Dataset d = simulate(th, a.T, a.seed);
  const fs::path dir(a.out_dir);
  ensure_dir(dir);
  write_matrix_csv(dir / "x.csv", d.x, "x");
  write_matrix_csv(dir / "z_true.csv", *d.z_true, "z");
  save_theta(dir / "theta.json", th);
  json notes = nullptr;
  if (family == Family::nonlin1d) notes = {{"z_start", 0.0}, {"burn_in_steps", kNonlinBurnIn}};
  write_manifest(dir, "simulate", sub, {"x.csv", "z_true.csv", "theta.json"}, notes);
  std::cout << "simulated " << to_string(family) << " T=" << a.T << " n=" << th.n()
            << " m=" << th.m() << " seed=" << a.seed << " -> " << dir.string() << '\n';
}

// ---------------------------------------------------------------------------

struct FitArgs {
  std::string data;
  std::string family;
  std::string posterior = "vildsblk";
  int epochs = 500;
  Index window = 100;
  int L = 1;
  std::uint64_t seed = 0;
  bool fix_theta = false;
  std::string theta;
  Index hidden_width = 64;
  std::size_t layers = 5;
  double alpha = 0.1;
  Index n = 2;
  int batches = 0;
  double lr = 1.0;
  std::string out;
  bool verbose = false;
};

void cmd_fit(const FitArgs& a, const CLI::App& sub) {
  const Family family = parse_family(a.family);
  const Dataset data = read_dataset(a.data);

  GenerativeParams theta;
  if (!a.theta.empty()) {
    theta = load_theta(a.theta);
    if (theta.family != family) throw UsageError("--theta holds a different family than --family");
  } else if (family == Family::nonlin1d) {
    theta = GenerativeParams::nonlin1d_default();
  } else if (a.fix_theta) {
    throw UsageError("--fix-theta needs --theta for this family");
  } else {
    theta = initial_params_from_data(family, data, a.n, a.seed);
  }
  if (theta.m() != data.m())
    throw UsageError("data has " + std::to_string(data.m()) + " columns but theta has m = " +
                     std::to_string(theta.m()));
  if (sub.count("--n") > 0 && a.n != theta.n()) throw UsageError("--n disagrees with theta");

  FitConfig cfg;
  cfg.kind = parse_posterior_kind(a.posterior);
  if (cfg.kind == PosteriorKind::fixed) throw UsageError("--posterior must be mf, vildsblk or vildsmult");
  cfg.init.latent_dim = theta.n();
  cfg.init.hidden_width = a.hidden_width;
  cfg.init.depth = a.layers;
  cfg.init.alpha = a.alpha;
  cfg.init.seed = a.seed;
  cfg.L = a.L;
  cfg.window = std::min(a.window, data.T());
  cfg.minibatches_per_epoch = a.batches;
  cfg.epochs = a.epochs;
  cfg.base_lr = a.lr;
  cfg.seed = a.seed;
  cfg.learn_theta = !a.fix_theta;

  const PosteriorParams phi0 = init_posterior(cfg.kind, data.x, cfg.init);
  const fs::path dir(a.out);
  ensure_dir(dir);

  const FitResult res = fit(cfg, data, theta, phi0, [&](const EpochRecord& r) {
    if (a.verbose)
      std::cerr << "epoch " << r.epoch << " elbo " << format_double(r.elbo) << " lr "
                << format_double(r.lr_scale) << '\n';
  });

  MatrixXd log(static_cast<Index>(res.epochs.size()), 6);
  for (std::size_t k = 0; k < res.epochs.size(); ++k) {
    const auto& e = res.epochs[k];
    log.row(static_cast<Index>(k)) << e.epoch, e.wall_seconds, e.elbo, e.lr_scale,
        e.cholesky_failures, e.spectral_radius_A;
  }
  write_csv(dir / "trainlog.csv",
            {"epoch", "wall_seconds", "elbo", "lr_scale", "cholesky_failures", "spectral_radius_A"},
            log);
  ModelFile model;
  model.theta = res.theta;
  model.phi = res.phi;
  model.config = cfg;
  save_model(dir / "model.json", model);
  write_manifest(dir, "fit", sub, {"model.json", "trainlog.csv"});

  const double last = res.epochs.empty() ? res.initial_elbo : res.epochs.back().elbo;
  std::cout << "fit " << to_string(cfg.kind) << " on " << to_string(family) << ": " << cfg.epochs
            << " epochs, ELBO " << format_double(res.initial_elbo) << " -> " << format_double(last)
            << ", cholesky failures " << res.cholesky_failures << '\n';
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string model;
  std::string data;
  std::string oracle = "none";
  std::string out_dir;
};

void cmd_eval(const EvalArgs& a, const CLI::App& sub) {
  const ModelFile model = load_model(a.model);
  const bool want_oracle = a.oracle == "kalman";
  if (want_oracle && model.theta.family != Family::lds)
    throw OracleError("the Kalman oracle needs an lds model, got " +
                      std::string(to_string(model.theta.family)));
  const Dataset data = read_dataset(a.data);
  if (data.m() != model.theta.m())
    throw UsageError("data has " + std::to_string(data.m()) + " columns but the model has m = " +
                     std::to_string(model.theta.m()));

  // the stored alpha factorizes on the training series; other data may need more
  PosteriorParams phi = model.phi;
  int failures = 0;
  const GaussianPosterior q = detail::with_alpha_retry(
      phi, model.config.max_alpha_doublings, failures,
      [&](const PosteriorParams& p) { return build_posterior(p, data.x, false); });
  const MarginalMoments mom = posterior_marginals(q);
  const Index n = q.n();

  const fs::path dir(a.out_dir);
  ensure_dir(dir);
  write_matrix_csv(dir / "posterior_means.csv", stack_rows(mom.means), "z");
  write_csv(dir / "posterior_var.csv", block_header("v", n), flatten_blocks(mom.var, n));
  write_csv(dir / "posterior_cross.csv", block_header("c", n), flatten_blocks(mom.cross, n));
  std::vector<std::string> outputs{"posterior_means.csv", "posterior_var.csv", "posterior_cross.csv"};

  const double elbo = evaluation_elbo(model.theta, phi, data, model.config.seed);
  std::cout << "eval T=" << data.T() << " n=" << n << " elbo " << format_double(elbo);

  if (want_oracle) {
    const ExactMoments exact = kalman_smoother(model.theta, data);
    const AlignmentScore s = align_and_score(stack_rows(mom.means), stack_rows(exact.means));
    MatrixXd table(n, 3);
    for (Index k = 0; k < n; ++k) table.row(k) << static_cast<double>(k + 1), s.r2[k], s.rmse[k];
    write_csv(dir / "comparison.csv", {"dim", "r2", "rmse"}, table);
    outputs.push_back("comparison.csv");
    std::cout << " log_evidence " << format_double(exact.log_evidence) << " r2";
    for (Index k = 0; k < n; ++k) std::cout << ' ' << format_double(s.r2[k]);
  }
  std::cout << '\n';
  write_manifest(dir, "eval", sub, outputs);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Variational smoothing for state-space models"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  SimulateArgs sa;
  auto* sim = app.add_subcommand("simulate", "Sample a dataset from a generative model");
  sim->add_option("--family", sa.family, "lds | plds | nonlin1d")->required();
  sim->add_option("--T", sa.T, "Series length")->required();
  sim->add_option("--n", sa.n, "Latent dimension")->capture_default_str();
  sim->add_option("--m", sa.m, "Observation dimension")->capture_default_str();
  sim->add_option("--seed", sa.seed)->capture_default_str();
  sim->add_option("--out-dir", sa.out_dir)->required();
  sim->add_option("--theta", sa.theta, "theta.json to simulate from instead of the defaults");

  FitArgs fa;
  auto* fitc = app.add_subcommand("fit", "Fit a posterior (and optionally theta) to data");
  fitc->add_option("--data", fa.data, "x.csv")->required();
  fitc->add_option("--family", fa.family)->required();
  fitc->add_option("--posterior", fa.posterior, "mf | vildsblk | vildsmult")->capture_default_str();
  fitc->add_option("--epochs", fa.epochs)->capture_default_str()->check(CLI::NonNegativeNumber);
  fitc->add_option("--window", fa.window)->capture_default_str()->check(CLI::PositiveNumber);
  fitc->add_option("--L", fa.L, "Samples per gradient")->capture_default_str()->check(CLI::PositiveNumber);
  fitc->add_option("--seed", fa.seed)->capture_default_str();
  fitc->add_flag("--fix-theta", fa.fix_theta, "Hold theta at --theta");
  fitc->add_option("--theta", fa.theta, "theta.json (start point, or fixed with --fix-theta)");
  fitc->add_option("--hidden-width", fa.hidden_width)->capture_default_str()->check(CLI::PositiveNumber);
  fitc->add_option("--layers", fa.layers)->capture_default_str()->check(CLI::PositiveNumber);
  fitc->add_option("--alpha", fa.alpha)->capture_default_str()->check(CLI::PositiveNumber);
  fitc->add_option("--n", fa.n, "Latent dimension when theta is learned from scratch")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  fitc->add_option("--batches-per-epoch", fa.batches, "0: one pass, ceil(T / window)")
      ->capture_default_str()
      ->check(CLI::NonNegativeNumber);
  fitc->add_option("--lr", fa.lr)->capture_default_str()->check(CLI::PositiveNumber);
  fitc->add_option("--out", fa.out, "Output directory")->required();
  fitc->add_flag("--verbose", fa.verbose, "Per-epoch progress on stderr");

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "Posterior moments, optionally against the Kalman smoother");
  ev->add_option("--model", ea.model)->required();
  ev->add_option("--data", ea.data)->required();
  ev->add_option("--oracle", ea.oracle)
      ->capture_default_str()
      ->check(CLI::IsMember({"kalman", "none"}));
  ev->add_option("--out-dir", ea.out_dir)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*sim) cmd_simulate(sa, *sim);
    if (*fitc) cmd_fit(fa, *fitc);
    if (*ev) cmd_eval(ea, *ev);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const OracleError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kOracle;
  } catch (const IoError& e) {
    std::cerr << "I/O error: " << e.what() << '\n';
    return kIo;
  } catch (const NonFiniteObjective& e) {
    std::cerr << "numeric abort: " << e.what() << '\n';
    return kNumeric;
  } catch (const NotPositiveDefinite& e) {
    std::cerr << "numeric abort: " << e.what() << '\n';
    return kNumeric;
  } catch (const Error& e) {
    // bad parameter values, shapes, counts: the inputs were unusable
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  }
  return kOk;
}
