#include "attnalign/checkpoint.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>

namespace attnalign {

namespace {

using nlohmann::json;

json tensor_to_json(const std::string& name, const Tensor& t) {
  json values = json::array();
  for (double v : t.data) values.push_back(double_to_hex(v));
  return json{{"name", name}, {"shape", t.shape}, {"values", std::move(values)}};
}

Tensor tensor_from_json(const json& j) {
  const std::vector<int> shape = j.at("shape").get<std::vector<int>>();
  const auto& values = j.at("values");
  std::vector<double> data;
  data.reserve(values.size());
  for (const auto& v : values) data.push_back(hex_to_double(v.get<std::string>()));
  return Tensor(shape, std::move(data));
}

json params_to_json(const std::vector<NamedParam>& params) {
  json arr = json::array();
  for (const NamedParam& p : params) arr.push_back(tensor_to_json(p.name, *p.tensor));
  return arr;
}

void params_from_json(const json& arr, const std::vector<NamedParam>& params,
                      const char* what) {
  if (arr.size() != params.size()) {
    throw ParseError(std::string(what) + " holds " + std::to_string(arr.size()) +
                     " tensors, model expects " + std::to_string(params.size()));
  }
  for (size_t i = 0; i < params.size(); ++i) {
    const json& j = arr.at(i);
    if (j.at("name").get<std::string>() != params[i].name) {
      throw ParseError(std::string(what) + " entry " + std::to_string(i) + " is '" +
                       j.at("name").get<std::string>() + "', expected '" + params[i].name + "'");
    }
    Tensor t = tensor_from_json(j);
    if (t.shape != params[i].tensor->shape) {
      throw ParseError(std::string(what) + " tensor '" + params[i].name + "' has shape " +
                       t.shape_str() + ", expected " + params[i].tensor->shape_str());
    }
    *params[i].tensor = std::move(t);
  }
}

}  // namespace

std::string double_to_hex(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%a", v);
  return buf;
}

double hex_to_double(const std::string& s) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0') {
    throw ParseError("malformed hex float '" + s + "'");
  }
  return v;
}

void save_checkpoint(const std::string& path, Model& model, const nlohmann::json& run_config,
                     int epoch, const AdamState& opt) {
  const std::vector<NamedParam> params = model.params();
  json doc;
  doc["format"] = "attnalign-checkpoint-v1";
  doc["variant"] = model.variant();
  doc["model_config"] = model.config_json();
  doc["run_config"] = run_config;
  doc["epoch"] = epoch;
  doc["params"] = params_to_json(params);

  json opt_json;
  opt_json["step"] = opt.step;
  json m = json::array(), v = json::array();
  for (size_t i = 0; i < opt.m.size(); ++i) {
    m.push_back(tensor_to_json(params[i].name, opt.m[i]));
    v.push_back(tensor_to_json(params[i].name, opt.v[i]));
  }
  opt_json["m"] = std::move(m);
  opt_json["v"] = std::move(v);
  doc["optimizer"] = std::move(opt_json);

  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open " + path + " for writing");
  f << doc.dump(2) << "\n";
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open " + path + " for reading");
  json doc;
  try {
    f >> doc;
  } catch (const json::exception& e) {
    throw ParseError(path + ": " + e.what());
  }
  try {
    if (doc.at("format").get<std::string>() != "attnalign-checkpoint-v1") {
      throw ParseError(path + ": unknown checkpoint format");
    }
    LoadedCheckpoint out;
    out.model = make_model(doc.at("variant").get<std::string>(), doc.at("model_config"));
    out.run_config = doc.value("run_config", json::object());
    out.epoch = doc.at("epoch").get<int>();
    const std::vector<NamedParam> params = out.model->params();
    params_from_json(doc.at("params"), params, "params");

    const json& opt = doc.at("optimizer");
    out.opt.step = opt.at("step").get<long>();
    out.opt.m.resize(params.size());
    out.opt.v.resize(params.size());
    std::vector<NamedParam> m_view, v_view;
    for (size_t i = 0; i < params.size(); ++i) {
      out.opt.m[i] = Tensor::zeros(params[i].tensor->shape);
      out.opt.v[i] = Tensor::zeros(params[i].tensor->shape);
      m_view.push_back({params[i].name, &out.opt.m[i]});
      v_view.push_back({params[i].name, &out.opt.v[i]});
    }
    params_from_json(opt.at("m"), m_view, "optimizer.m");
    params_from_json(opt.at("v"), v_view, "optimizer.v");
    return out;
  } catch (const json::exception& e) {
    throw ParseError(path + ": " + e.what());
  }
}

}  // namespace attnalign
