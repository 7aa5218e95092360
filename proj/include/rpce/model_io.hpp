#pragma once

// Versioned JSON persistence for SurrogateModel. Doubles are written as
// C hex-float strings, so a save/load round trip is bit-exact.

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>

#include <json.hpp>

#include "rpce/error.hpp"
#include "rpce/hermite.hpp"
#include "rpce/rotate.hpp"

namespace rpce {

inline constexpr const char* kModelFormat = "rpce-model";
inline constexpr int kModelVersion = 1;

inline std::string hex_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", v);
  return buf;
}

inline double parse_hex_double(const std::string& s) {
  if (s.empty()) throw ConfigError("model: empty number");
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size()) throw ConfigError("model: bad number '" + s + "'");
  return v;
}

namespace detail {

inline nlohmann::json matrix_json(const Matrix& m) {
  nlohmann::json data = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) data.push_back(hex_double(m(i, j)));
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", data}};
}

inline Matrix matrix_from_json(const nlohmann::json& j) {
  const auto rows = j.at("rows").get<Eigen::Index>();
  const auto cols = j.at("cols").get<Eigen::Index>();
  const auto& data = j.at("data");
  if (rows < 0 || cols < 0 || data.size() != static_cast<std::size_t>(rows * cols))
    throw ConfigError("model: matrix shape does not match its data");
  Matrix m(rows, cols);
  std::size_t k = 0;
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index c = 0; c < cols; ++c) m(i, c) = parse_hex_double(data[k++].get<std::string>());
  return m;
}

}  // namespace detail

inline nlohmann::json model_to_json(const SurrogateModel& model) {
  if (!model.basis) throw InvalidArgument("model_to_json: model has no basis");
  nlohmann::json coeffs = nlohmann::json::array();
  for (Eigen::Index n = 0; n < model.coeffs.size(); ++n) coeffs.push_back(hex_double(model.coeffs[n]));
  nlohmann::json history = nlohmann::json::array();
  for (const IterationRecord& r : model.history)
    history.push_back({{"epsilon", hex_double(r.epsilon)},
                       {"rotation_distance", hex_double(r.rotation_distance)},
                       {"residual", hex_double(r.residual)},
                       {"validation", hex_double(r.validation)}});
  nlohmann::json j;
  j["format"] = kModelFormat;
  j["version"] = kModelVersion;
  j["d"] = model.input_dim();
  j["d_tilde"] = model.reduced_dim();
  j["order"] = model.basis->order();
  j["mode"] = to_string(model.basis->mode());
  j["N"] = model.basis->size();
  j["reduction"] = model.reduction ? detail::matrix_json(*model.reduction) : nlohmann::json(nullptr);
  j["rotation"] = detail::matrix_json(model.rotation);
  j["coeffs"] = coeffs;
  j["history"] = history;
  j["converged"] = model.converged;
  return j;
}

inline SurrogateModel model_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != kModelFormat) throw ConfigError("model: unknown format");
    const int version = j.at("version").get<int>();
    if (version != kModelVersion) throw ConfigError("model: unsupported version " + std::to_string(version));
    const int d = j.at("d").get<int>();
    const int dt = j.at("d_tilde").get<int>();
    SurrogateModel m;
    m.basis = std::make_shared<const MultiIndexBasis>(dt, j.at("order").get<int>(),
                                                      basis_mode_from_string(j.at("mode").get<std::string>()));
    if (m.basis->size() != j.at("N").get<std::size_t>()) throw ConfigError("model: basis size mismatch");
    if (!j.at("reduction").is_null()) {
      m.reduction = detail::matrix_from_json(j.at("reduction"));
      if (m.reduction->rows() != dt || m.reduction->cols() != d) throw ConfigError("model: reduction shape mismatch");
    } else if (d != dt) {
      throw ConfigError("model: d differs from d_tilde without a reduction");
    }
    m.rotation = detail::matrix_from_json(j.at("rotation"));
    if (m.rotation.rows() != dt || m.rotation.cols() != dt) throw ConfigError("model: rotation shape mismatch");
    const auto& c = j.at("coeffs");
    if (c.size() != m.basis->size()) throw ConfigError("model: coefficient count mismatch");
    m.coeffs.resize(static_cast<Eigen::Index>(c.size()));
    for (std::size_t n = 0; n < c.size(); ++n) m.coeffs[static_cast<Eigen::Index>(n)] = parse_hex_double(c[n].get<std::string>());
    for (const auto& h : j.at("history")) {
      IterationRecord r;
      r.epsilon = parse_hex_double(h.at("epsilon").get<std::string>());
      r.rotation_distance = parse_hex_double(h.at("rotation_distance").get<std::string>());
      r.residual = parse_hex_double(h.at("residual").get<std::string>());
      r.validation = parse_hex_double(h.at("validation").get<std::string>());
      m.history.push_back(r);
    }
    m.converged = j.at("converged").get<bool>();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model: ") + e.what());
  } catch (const InvalidArgument& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
}

inline void save_model(const SurrogateModel& model, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write '" + path + "'");
  out << model_to_json(model).dump(1) << '\n';
}

inline SurrogateModel load_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("model '" + path + "': " + e.what());
  }
  return model_from_json(j);
}

}  // namespace rpce
