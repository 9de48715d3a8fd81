#pragma once

// CSV for matrices and series, JSON for structured parameters. Numbers are
// written in shortest round-trip form, so every read reproduces the written
// doubles bit for bit.

#include <charconv>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "vilds/errors.hpp"
#include "vilds/genmodels.hpp"
#include "vilds/posteriors.hpp"
#include "vilds/trainer.hpp"
#include "vilds/version.hpp"

namespace vilds {

using json = nlohmann::json;

inline std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw IoError("cannot parse number '" + std::string(s) + "'");
  return v;
}

// ---------------------------------------------------------------------------
// CSV

/// Header names prefix1..prefixK.
inline std::vector<std::string> numbered_header(std::string_view prefix, Index k) {
  std::vector<std::string> h;
  for (Index i = 1; i <= k; ++i) h.push_back(std::string(prefix) + std::to_string(i));
  return h;
}

inline void write_csv(const std::filesystem::path& path, const std::vector<std::string>& header,
                      const MatrixXd& M) {
  if (static_cast<Index>(header.size()) != M.cols())
    throw DimensionMismatch("header width differs from matrix width");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  for (std::size_t j = 0; j < header.size(); ++j) out << (j ? "," : "") << header[j];
  out << '\n';
  for (Index i = 0; i < M.rows(); ++i) {
    for (Index j = 0; j < M.cols(); ++j) out << (j ? "," : "") << format_double(M(i, j));
    out << '\n';
  }
  if (!out) throw IoError("write to '" + path.string() + "' failed");
}

inline void write_matrix_csv(const std::filesystem::path& path, const MatrixXd& M,
                             std::string_view prefix) {
  write_csv(path, numbered_header(prefix, M.cols()), M);
}

struct CsvTable {
  std::vector<std::string> header;
  MatrixXd values;
};

inline CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  auto split = [](const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ss(line);
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    return cells;
  };
  std::string line;
  CsvTable t;
  if (!std::getline(in, line)) throw IoError("'" + path.string() + "' is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  t.header = split(line);
  std::vector<double> flat;
  Index rows = 0;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = split(line);
    if (cells.size() != t.header.size())
      throw IoError("'" + path.string() + "' row " + std::to_string(rows + 1) + " has " +
                    std::to_string(cells.size()) + " fields, expected " +
                    std::to_string(t.header.size()));
    for (const auto& c : cells) flat.push_back(parse_double(c));
    ++rows;
  }
  const Index cols = static_cast<Index>(t.header.size());
  t.values = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      flat.data(), rows, cols);
  return t;
}

inline MatrixXd read_matrix_csv(const std::filesystem::path& path) { return read_csv(path).values; }

// ---------------------------------------------------------------------------
// JSON building blocks

inline json to_json(const VectorXd& v) {
  json a = json::array();
  for (Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

inline json to_json(const MatrixXd& M) {
  json rows = json::array();
  for (Index i = 0; i < M.rows(); ++i) {
    json r = json::array();
    for (Index j = 0; j < M.cols(); ++j) r.push_back(M(i, j));
    rows.push_back(std::move(r));
  }
  return rows;
}

namespace detail {

template <class T>
T json_get(const json& j, const char* key) {
  if (!j.is_object() || !j.contains(key)) throw IoError(std::string("missing field '") + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw IoError(std::string("bad field '") + key + "': " + e.what());
  }
}

}  // namespace detail

inline VectorXd vector_from_json(const json& j) {
  if (!j.is_array()) throw IoError("expected a JSON array");
  VectorXd v(static_cast<Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_number()) throw IoError("expected a number");
    v[static_cast<Index>(i)] = j[i].get<double>();
  }
  return v;
}

/// Rows of equal length; an empty array is a 0 x 0 matrix.
inline MatrixXd matrix_from_json(const json& j) {
  if (!j.is_array()) throw IoError("expected an array of rows");
  const Index rows = static_cast<Index>(j.size());
  const Index cols = rows ? static_cast<Index>(j[0].size()) : 0;
  MatrixXd M(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    const VectorXd r = vector_from_json(j[static_cast<std::size_t>(i)]);
    if (r.size() != cols) throw IoError("ragged matrix rows");
    M.row(i) = r.transpose();
  }
  return M;
}

// ---------------------------------------------------------------------------
// Generative parameters

inline json to_json(const GenerativeParams& th) {
  json j;
  j["family"] = std::string(to_string(th.family));
  j["n"] = th.n();
  j["m"] = th.m();
  j["z1_mean"] = to_json(th.z1_mean);
  j["z1_cov"] = to_json(th.z1_cov);
  if (th.family == Family::nonlin1d) {
    const auto& c = th.nonlin;
    j["nonlin"] = {{"a", c.a},
                   {"b", c.b},
                   {"c", c.c},
                   {"innov_scale", c.innov_scale},
                   {"obs_gain", c.obs_gain},
                   {"obs_scale", c.obs_scale}};
    return j;
  }
  j["A"] = to_json(th.A);
  j["Q"] = to_json(th.Q);
  j["C"] = to_json(th.C);
  if (th.family == Family::plds) j["d"] = to_json(th.d);
  if (th.family == Family::lds) j["obs_var"] = to_json(th.obs_var);
  return j;
}

inline GenerativeParams theta_from_json(const json& j) {
  GenerativeParams th;
  th.family = parse_family(detail::json_get<std::string>(j, "family"));
  if (th.family == Family::nonlin1d) {
    th = GenerativeParams::nonlin1d_default();
    if (j.contains("nonlin")) {
      const json& c = j.at("nonlin");
      auto& k = th.nonlin;
      k.a = detail::json_get<double>(c, "a");
      k.b = detail::json_get<double>(c, "b");
      k.c = detail::json_get<double>(c, "c");
      k.innov_scale = detail::json_get<double>(c, "innov_scale");
      k.obs_gain = detail::json_get<double>(c, "obs_gain");
      k.obs_scale = detail::json_get<double>(c, "obs_scale");
      th.Q = MatrixXd::Constant(1, 1, k.innov_scale * k.innov_scale);
      th.C = MatrixXd::Constant(1, 1, k.obs_gain);
    }
    if (j.contains("z1_mean")) th.z1_mean = vector_from_json(j.at("z1_mean"));
    if (j.contains("z1_cov")) th.z1_cov = matrix_from_json(j.at("z1_cov"));
    th.validate();
    return th;
  }
  th.A = matrix_from_json(detail::json_get<json>(j, "A"));
  th.Q = matrix_from_json(detail::json_get<json>(j, "Q"));
  th.C = matrix_from_json(detail::json_get<json>(j, "C"));
  th.z1_mean = vector_from_json(detail::json_get<json>(j, "z1_mean"));
  th.z1_cov = matrix_from_json(detail::json_get<json>(j, "z1_cov"));
  if (th.family == Family::plds) th.d = vector_from_json(detail::json_get<json>(j, "d"));
  if (th.family == Family::lds) th.obs_var = vector_from_json(detail::json_get<json>(j, "obs_var"));
  th.validate();
  return th;
}

// ---------------------------------------------------------------------------
// Posterior parameters

inline json to_json(const Mlp& net) {
  json W = json::array(), b = json::array();
  for (const auto& w : net.W) W.push_back(to_json(w));
  for (const auto& v : net.b) b.push_back(to_json(v));
  return {{"layout", net.layout().sizes}, {"W", W}, {"b", b}};
}

inline Mlp mlp_from_json(const json& j) {
  const auto sizes = detail::json_get<std::vector<Index>>(j, "layout");
  NetLayout layout(sizes);
  Mlp net;
  const json& W = detail::json_get<json>(j, "W");
  const json& b = detail::json_get<json>(j, "b");
  if (W.size() + 1 != sizes.size() || b.size() + 1 != sizes.size())
    throw IoError("network layer count differs from layout");
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    net.W.push_back(matrix_from_json(W[l]));
    net.b.push_back(vector_from_json(b[l]));
    if (net.W.back().rows() != sizes[l + 1] || net.W.back().cols() != sizes[l] ||
        net.b.back().size() != sizes[l + 1])
      throw IoError("network weights do not match layout");
  }
  return net;
}

inline json to_json(const PosteriorParams& phi) {
  json j;
  j["kind"] = std::string(to_string(kind_of(phi)));
  std::visit(
      [&](const auto& p) {
        using P = std::decay_t<decltype(p)>;
        j["alpha"] = p.alpha;
        j["norm"] = {{"shift", to_json(p.norm.shift)}, {"scale", to_json(p.norm.scale)}};
        if constexpr (std::is_same_v<P, MeanFieldParams>) {
          j["net_mu"] = to_json(p.net_mu);
          j["net_V"] = to_json(p.net_V);
        } else if constexpr (std::is_same_v<P, VildsBlkParams>) {
          j["net_mu"] = to_json(p.net_mu);
          j["net_D"] = to_json(p.net_D);
          j["net_B"] = to_json(p.net_B);
        } else {
          j["net_M"] = to_json(p.net_M);
          j["net_C"] = to_json(p.net_C);
          j["prior_A"] = to_json(p.prior_A);
          j["prior_Q_chol"] = to_json(p.prior_Q_chol);
        }
      },
      phi);
  return j;
}

inline PosteriorParams posterior_from_json(const json& j) {
  const PosteriorKind kind = parse_posterior_kind(detail::json_get<std::string>(j, "kind"));
  auto common = [&](auto& p) {
    p.alpha = detail::json_get<double>(j, "alpha");
    if (!(p.alpha > 0.0)) throw IoError("alpha must be positive");
    const json& nm = detail::json_get<json>(j, "norm");
    p.norm.shift = vector_from_json(detail::json_get<json>(nm, "shift"));
    p.norm.scale = vector_from_json(detail::json_get<json>(nm, "scale"));
  };
  auto net = [&](const char* key) { return mlp_from_json(detail::json_get<json>(j, key)); };
  switch (kind) {
    case PosteriorKind::mf: {
      MeanFieldParams p;
      common(p);
      p.net_mu = net("net_mu");
      p.net_V = net("net_V");
      return p;
    }
    case PosteriorKind::vildsblk: {
      VildsBlkParams p;
      common(p);
      p.net_mu = net("net_mu");
      p.net_D = net("net_D");
      p.net_B = net("net_B");
      return p;
    }
    default: {
      VildsMultParams p;
      common(p);
      p.net_M = net("net_M");
      p.net_C = net("net_C");
      p.prior_A = matrix_from_json(detail::json_get<json>(j, "prior_A"));
      p.prior_Q_chol = matrix_from_json(detail::json_get<json>(j, "prior_Q_chol"));
      return p;
    }
  }
}

// ---------------------------------------------------------------------------
// Fit configuration

inline json to_json(const FitConfig& c) {
  return {{"posterior", std::string(to_string(c.kind))},
          {"latent_dim", c.init.latent_dim},
          {"hidden_width", c.init.hidden_width},
          {"layers", c.init.depth},
          {"alpha", c.init.alpha},
          {"init_seed", c.init.seed},
          {"L", c.L},
          {"window", c.window},
          {"minibatches_per_epoch", c.minibatches_per_epoch},
          {"epochs", c.epochs},
          {"base_lr", c.base_lr},
          {"patience", c.patience},
          {"decay_factor", c.decay_factor},
          {"seed", c.seed},
          {"learn_theta", c.learn_theta},
          {"learn_phi", c.learn_phi},
          {"max_alpha_doublings", c.max_alpha_doublings}};
}

inline FitConfig fit_config_from_json(const json& j) {
  using detail::json_get;
  FitConfig c;
  c.kind = parse_posterior_kind(json_get<std::string>(j, "posterior"));
  c.init.latent_dim = json_get<Index>(j, "latent_dim");
  c.init.hidden_width = json_get<Index>(j, "hidden_width");
  c.init.depth = json_get<std::size_t>(j, "layers");
  c.init.alpha = json_get<double>(j, "alpha");
  c.init.seed = json_get<std::uint64_t>(j, "init_seed");
  c.L = json_get<int>(j, "L");
  c.window = json_get<Index>(j, "window");
  c.minibatches_per_epoch = json_get<int>(j, "minibatches_per_epoch");
  c.epochs = json_get<int>(j, "epochs");
  c.base_lr = json_get<double>(j, "base_lr");
  c.patience = json_get<int>(j, "patience");
  c.decay_factor = json_get<double>(j, "decay_factor");
  c.seed = json_get<std::uint64_t>(j, "seed");
  c.learn_theta = json_get<bool>(j, "learn_theta");
  c.learn_phi = json_get<bool>(j, "learn_phi");
  c.max_alpha_doublings = json_get<int>(j, "max_alpha_doublings");
  return c;
}

// ---------------------------------------------------------------------------
// Files

struct ModelFile {
  GenerativeParams theta;
  PosteriorParams phi;
  FitConfig config;
  std::string version = kVersion;
};

inline json to_json(const ModelFile& m) {
  return {{"version", m.version},
          {"family", std::string(to_string(m.theta.family))},
          {"theta", to_json(m.theta)},
          {"phi", to_json(m.phi)},
          {"config", to_json(m.config)}};
}

inline ModelFile model_from_json(const json& j) {
  ModelFile m;
  m.version = detail::json_get<std::string>(j, "version");
  m.theta = theta_from_json(detail::json_get<json>(j, "theta"));
  if (detail::json_get<std::string>(j, "family") != to_string(m.theta.family))
    throw IoError("family tag disagrees with theta");
  m.phi = posterior_from_json(detail::json_get<json>(j, "phi"));
  m.config = fit_config_from_json(detail::json_get<json>(j, "config"));
  if (latent_dim(m.phi) != m.theta.n()) throw IoError("posterior and model latent dims differ");
  return m;
}

inline void write_json(const std::filesystem::path& path, const json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << j.dump(2) << '\n';
  if (!out) throw IoError("write to '" + path.string() + "' failed");
}

inline json read_json(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw IoError("'" + path.string() + "' is not valid JSON: " + e.what());
  }
}

inline void save_model(const std::filesystem::path& path, const ModelFile& m) {
  write_json(path, to_json(m));
}

inline ModelFile load_model(const std::filesystem::path& path) {
  return model_from_json(read_json(path));
}

inline void save_theta(const std::filesystem::path& path, const GenerativeParams& th) {
  write_json(path, to_json(th));
}

inline GenerativeParams load_theta(const std::filesystem::path& path) {
  return theta_from_json(read_json(path));
}

}  // namespace vilds
