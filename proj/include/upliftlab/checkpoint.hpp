#pragma once

// JSON persistence for models and observation batches. Checkpoints are
// self-describing: a format version, a kind tag, the full network
// configuration and one flat float array per parameter matrix. Doubles
// survive the round trip bit-for-bit (the serializer emits shortest
// round-trip decimal forms).

#include <fstream>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "upliftlab/dataset.hpp"
#include "upliftlab/drcfr.hpp"
#include "upliftlab/mlp.hpp"

namespace upliftlab {

inline constexpr int kCheckpointVersion = 1;

namespace detail {

using nlohmann::json;

inline json matrix_to_json(const Matrix& m) {
  return json{{"rows", m.rows}, {"cols", m.cols}, {"data", m.data}};
}

inline Matrix matrix_from_json(const json& j) {
  Matrix m(j.at("rows").get<std::size_t>(), j.at("cols").get<std::size_t>());
  const auto data = j.at("data").get<std::vector<double>>();
  if (data.size() != m.size())
    throw std::runtime_error("checkpoint: matrix data length does not match shape");
  m.data = data;
  return m;
}

inline std::string hidden_name(HiddenActivation a) {
  return a == HiddenActivation::relu ? "relu" : "tanh";
}

inline HiddenActivation hidden_from_name(const std::string& s) {
  if (s == "relu") return HiddenActivation::relu;
  if (s == "tanh") return HiddenActivation::tanh;
  throw std::runtime_error("checkpoint: unknown hidden activation '" + s + "'");
}

inline std::string output_name(OutputActivation a) {
  switch (a) {
    case OutputActivation::identity: return "identity";
    case OutputActivation::sigmoid: return "sigmoid";
    case OutputActivation::tanh: return "tanh";
    case OutputActivation::softmax: return "softmax";
  }
  throw std::logic_error("checkpoint: unhandled output activation");
}

inline OutputActivation output_from_name(const std::string& s) {
  if (s == "identity") return OutputActivation::identity;
  if (s == "sigmoid") return OutputActivation::sigmoid;
  if (s == "tanh") return OutputActivation::tanh;
  if (s == "softmax") return OutputActivation::softmax;
  throw std::runtime_error("checkpoint: unknown output activation '" + s + "'");
}

inline json spec_to_json(const MlpSpec& spec) {
  return json{{"widths", spec.widths},
              {"hidden", hidden_name(spec.hidden)},
              {"output", output_name(spec.output)}};
}

inline MlpSpec spec_from_json(const json& j) {
  MlpSpec spec;
  spec.widths = j.at("widths").get<std::vector<int>>();
  spec.hidden = hidden_from_name(j.at("hidden").get<std::string>());
  spec.output = output_from_name(j.at("output").get<std::string>());
  return spec;
}

inline json store_to_json(const ParamStore& store) {
  json j = json::object();
  for (const Param& p : store) j[p.name] = matrix_to_json(p.value);
  return j;
}

// Copies serialized values into an already laid-out store; every parameter
// must be present with its exact shape.
inline void load_store_values(ParamStore& store, const json& j, const std::string& where) {
  for (Param& p : store) {
    if (!j.contains(p.name))
      throw std::runtime_error("checkpoint: " + where + " is missing parameter " + p.name);
    const Matrix m = matrix_from_json(j.at(p.name));
    if (!m.same_shape(p.value))
      throw std::runtime_error("checkpoint: " + where + " parameter " + p.name +
                               " has the wrong shape");
    p.value = m;
  }
  if (j.size() != store.size())
    throw std::runtime_error("checkpoint: " + where + " has extra parameters");
}

inline json drcfr_config_to_json(const DrcfrConfig& c) {
  return json{{"num_arms", c.num_arms},
              {"input_dim", c.input_dim},
              {"gamma_net", spec_to_json(c.gamma_net)},
              {"delta_net", spec_to_json(c.delta_net)},
              {"upsilon_net", spec_to_json(c.upsilon_net)},
              {"classifier_net", spec_to_json(c.classifier_net)},
              {"propensity_net", spec_to_json(c.propensity_net)},
              {"trunk_net", spec_to_json(c.trunk_net)},
              {"head_net", spec_to_json(c.head_net)},
              {"alpha_ce", c.alpha_ce},
              {"beta_im", c.beta_im},
              {"gamma_ate", c.gamma_ate},
              {"delta_mono", c.delta_mono},
              {"lambda_reg", c.lambda_reg},
              {"lr", c.lr},
              {"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"sinkhorn", json{{"reg_units", c.sinkhorn.reg_units},
                                {"max_iters", c.sinkhorn.max_iters},
                                {"tol", c.sinkhorn.tol}}}};
}

inline DrcfrConfig drcfr_config_from_json(const json& j) {
  DrcfrConfig c;
  c.num_arms = j.at("num_arms").get<int>();
  c.input_dim = j.at("input_dim").get<int>();
  c.gamma_net = spec_from_json(j.at("gamma_net"));
  c.delta_net = spec_from_json(j.at("delta_net"));
  c.upsilon_net = spec_from_json(j.at("upsilon_net"));
  c.classifier_net = spec_from_json(j.at("classifier_net"));
  c.propensity_net = spec_from_json(j.at("propensity_net"));
  c.trunk_net = spec_from_json(j.at("trunk_net"));
  c.head_net = spec_from_json(j.at("head_net"));
  c.alpha_ce = j.at("alpha_ce").get<double>();
  c.beta_im = j.at("beta_im").get<double>();
  c.gamma_ate = j.at("gamma_ate").get<double>();
  c.delta_mono = j.at("delta_mono").get<double>();
  c.lambda_reg = j.at("lambda_reg").get<double>();
  c.lr = j.at("lr").get<double>();
  c.epochs = j.at("epochs").get<int>();
  c.batch_size = j.at("batch_size").get<int>();
  const json& s = j.at("sinkhorn");
  c.sinkhorn.reg_units = s.at("reg_units").get<double>();
  c.sinkhorn.max_iters = s.at("max_iters").get<int>();
  c.sinkhorn.tol = s.at("tol").get<double>();
  return c;
}

inline void write_json_file(const json& j, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
  out << j.dump(2) << "\n";
  if (!out) throw std::runtime_error("checkpoint: write failed for " + path);
}

inline json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw std::runtime_error("checkpoint: " + path + " is not valid JSON: " + e.what());
  }
  return j;
}

inline void check_header(const json& j, const std::string& kind, const std::string& path) {
  if (!j.is_object() || !j.contains("format_version") || !j.contains("kind"))
    throw std::runtime_error("checkpoint: " + path + " lacks a format header");
  if (j.at("format_version").get<int>() != kCheckpointVersion)
    throw std::runtime_error("checkpoint: " + path + " has an unsupported format version");
  if (j.at("kind").get<std::string>() != kind)
    throw std::runtime_error("checkpoint: " + path + " holds a '" +
                             j.at("kind").get<std::string>() + "', expected '" + kind + "'");
}

}  // namespace detail

inline nlohmann::json model_to_json(const DrcfrModel& model) {
  nlohmann::json stores = nlohmann::json::object();
  stores["gamma"] = detail::store_to_json(model.gamma);
  stores["delta"] = detail::store_to_json(model.delta);
  stores["upsilon"] = detail::store_to_json(model.upsilon);
  stores["classifier"] = detail::store_to_json(model.classifier);
  stores["propensity"] = detail::store_to_json(model.propensity);
  stores["trunk"] = detail::store_to_json(model.trunk);
  nlohmann::json heads = nlohmann::json::array();
  for (const ParamStore& h : model.heads) heads.push_back(detail::store_to_json(h));
  stores["heads"] = heads;
  return nlohmann::json{{"format_version", kCheckpointVersion},
                        {"kind", "drcfr-model"},
                        {"config", detail::drcfr_config_to_json(model.config)},
                        {"params", stores}};
}

inline DrcfrModel model_from_json(const nlohmann::json& j, const std::string& where) {
  const DrcfrConfig config = detail::drcfr_config_from_json(j.at("config"));
  DrcfrModel model = DrcfrModel::init(config, 0);
  const nlohmann::json& stores = j.at("params");
  detail::load_store_values(model.gamma, stores.at("gamma"), where + ".gamma");
  detail::load_store_values(model.delta, stores.at("delta"), where + ".delta");
  detail::load_store_values(model.upsilon, stores.at("upsilon"), where + ".upsilon");
  detail::load_store_values(model.classifier, stores.at("classifier"), where + ".classifier");
  detail::load_store_values(model.propensity, stores.at("propensity"), where + ".propensity");
  detail::load_store_values(model.trunk, stores.at("trunk"), where + ".trunk");
  const nlohmann::json& heads = stores.at("heads");
  if (heads.size() != model.heads.size())
    throw std::runtime_error("checkpoint: " + where + " head count mismatch");
  for (std::size_t t = 0; t < model.heads.size(); ++t)
    detail::load_store_values(model.heads[t], heads.at(t),
                              where + ".head" + std::to_string(t));
  return model;
}

inline void save_model(const DrcfrModel& model, const std::string& path) {
  detail::write_json_file(model_to_json(model), path);
}

inline DrcfrModel load_model(const std::string& path) {
  const nlohmann::json j = detail::read_json_file(path);
  try {
    detail::check_header(j, "drcfr-model", path);
    return model_from_json(j, path);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("checkpoint: " + path + " is malformed: " + e.what());
  }
}

inline nlohmann::json batch_to_json(const ObservationBatch& batch) {
  nlohmann::json j{{"covariates", detail::matrix_to_json(batch.covariates)},
                   {"treatments", batch.treatments},
                   {"outcomes", batch.outcomes},
                   {"period", batch.period}};
  if (batch.has_true_probs()) j["true_probs"] = detail::matrix_to_json(batch.true_probs);
  return j;
}

inline ObservationBatch batch_from_json(const nlohmann::json& j) {
  ObservationBatch batch;
  batch.covariates = detail::matrix_from_json(j.at("covariates"));
  batch.treatments = j.at("treatments").get<std::vector<int>>();
  batch.outcomes = j.at("outcomes").get<std::vector<int>>();
  batch.period = j.at("period").get<int>();
  if (j.contains("true_probs")) batch.true_probs = detail::matrix_from_json(j.at("true_probs"));
  if (batch.treatments.size() != batch.size() || batch.outcomes.size() != batch.size())
    throw std::runtime_error("checkpoint: batch column lengths disagree");
  return batch;
}

}  // namespace upliftlab
