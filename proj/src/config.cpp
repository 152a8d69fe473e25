#include "brnpa/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "brnpa/error.hpp"
#include "brnpa/tensor.hpp"

namespace brnpa {

using nlohmann::json;

std::string to_string(HeadKind kind) {
  switch (kind) {
    case HeadKind::Npa: return "npa";
    case HeadKind::LearnedAttention: return "learned-attention";
    case HeadKind::AvgPool: return "avg-pool";
  }
  return "?";
}

HeadKind head_kind_from_string(const std::string& s) {
  if (s == "npa") return HeadKind::Npa;
  if (s == "learned-attention") return HeadKind::LearnedAttention;
  if (s == "avg-pool") return HeadKind::AvgPool;
  throw ValidationError("unknown head kind '" + s + "' (expected npa, learned-attention or avg-pool)");
}

std::size_t ModelSpec::map_extent() const {
  std::size_t extent = input_size;
  for (auto s : strides) extent = conv_output_extent(extent, 3, s, 1);
  return extent;
}

void ModelSpec::validate() const {
  if (channels.empty()) throw ValidationError("model.channels: at least one stage required");
  if (channels.size() != strides.size())
    throw ValidationError("model.strides: length " + std::to_string(strides.size()) +
                          " does not match model.channels length " + std::to_string(channels.size()));
  for (std::size_t i = 0; i < strides.size(); ++i) {
    if (strides[i] != 1 && strides[i] != 2)
      throw ValidationError("model.strides[" + std::to_string(i) + "]: must be 1 or 2");
    if (channels[i] == 0) throw ValidationError("model.channels[" + std::to_string(i) + "]: must be positive");
  }
  if (input_channels == 0 || input_size == 0) throw ValidationError("model: empty input");
  if (classes < 2) throw ValidationError("model.classes: need at least 2");
  const std::size_t p = map_extent() * map_extent();
  if (head != HeadKind::AvgPool) {
    try {
      npa.validate(p);
    } catch (const ValidationError& e) {
      throw ValidationError(std::string("model.n: ") + e.what());
    }
  }
  if (rank_heads && (head != HeadKind::Npa || npa.n != 3))
    throw ValidationError("model.rank_heads: requires head npa with n = 3");
}

void ExperimentConfig::validate() const {
  model.validate();
  if (data.image_size != model.input_size)
    throw ValidationError("data.image_size: " + std::to_string(data.image_size) +
                          " does not match model.input_size " + std::to_string(model.input_size));
  if (model.input_channels != 1) throw ValidationError("model.input_channels: shapes data is single-channel");
  if (model.classes != kShapeClasses) throw ValidationError("model.classes: shapes data has 3 classes");
  if (batch_size == 0) throw ValidationError("batch_size: must be positive");
  if (!(learning_rate >= 0.0)) throw ValidationError("learning_rate: must be >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ValidationError("momentum: must be in [0,1)");
  if (alpha.has_value() != teacher_checkpoint.has_value())
    throw ValidationError(alpha ? "alpha: given without teacher_checkpoint"
                                : "alpha: required when teacher_checkpoint is given");
  if (alpha && !(*alpha >= 0.0 && *alpha <= 1.0)) throw ValidationError("alpha: must be in [0,1]");
  for (std::size_t i = 0; i < seeds.size(); ++i)
    for (std::size_t j = 0; j < i; ++j)
      if (seeds[i] == seeds[j]) throw ValidationError("seeds[" + std::to_string(i) + "]: duplicate seed");
}

namespace {

// Reads an object field by field, then complains about anything left over.
class Fields {
 public:
  Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ValidationError(where("") + ": expected an object");
  }

  template <typename T>
  void read(const std::string& key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    out = convert<T>(j_.at(key), where(key));
  }

  template <typename T>
  void read_optional(const std::string& key, std::optional<T>& out) {
    seen_.insert(key);
    if (!j_.contains(key) || j_.at(key).is_null()) return;
    out = convert<T>(j_.at(key), where(key));
  }

  const json* child(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  std::string where(const std::string& key) const {
    if (key.empty()) return path_.empty() ? "config" : path_;
    return path_.empty() ? key : path_ + "." + key;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ValidationError(where(it.key()) + ": unknown key");
  }

  template <typename T>
  static T convert(const json& v, const std::string& at) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ValidationError(at + ": expected a boolean");
      return v.get<bool>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ValidationError(at + ": expected a string");
      return v.get<std::string>();
    } else if constexpr (std::is_same_v<T, double>) {
      if (!v.is_number()) throw ValidationError(at + ": expected a number");
      return v.get<double>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer() || v.get<std::int64_t>() < 0)
        throw ValidationError(at + ": expected a non-negative integer");
      return static_cast<T>(v.get<std::uint64_t>());
    } else {
      if (!v.is_array()) throw ValidationError(at + ": expected an array");
      T out;
      for (std::size_t i = 0; i < v.size(); ++i)
        out.push_back(convert<typename T::value_type>(v[i], at + "[" + std::to_string(i) + "]"));
      return out;
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

std::string join(const std::string& path, const std::string& key) {
  return path.empty() ? key : path + "." + key;
}

ShapesSpec data_from_json(const json& j, const std::string& path) {
  ShapesSpec d;
  Fields f(j, path);
  f.read("seed", d.seed);
  f.read("train", d.train);
  f.read("test", d.test);
  f.read("image_size", d.image_size);
  f.read("max_clutter", d.max_clutter);
  f.finish();
  return d;
}

}  // namespace

json model_to_json(const ModelSpec& m) {
  return {{"input_channels", m.input_channels},
          {"input_size", m.input_size},
          {"channels", m.channels},
          {"strides", m.strides},
          {"head", to_string(m.head)},
          {"n", m.npa.n},
          {"selection", to_string(m.npa.selection)},
          {"refine", m.npa.refine},
          {"similarity_floor", m.npa.similarity_floor},
          {"norm_epsilon", m.npa.norm_epsilon},
          {"classes", m.classes},
          {"rank_heads", m.rank_heads}};
}

ModelSpec model_from_json(const json& j, const std::string& path) {
  ModelSpec m;
  Fields f(j, path);
  f.read("input_channels", m.input_channels);
  f.read("input_size", m.input_size);
  f.read("channels", m.channels);
  f.read("strides", m.strides);
  std::string head = to_string(m.head), selection = to_string(m.npa.selection);
  f.read("head", head);
  f.read("selection", selection);
  try {
    m.head = head_kind_from_string(head);
  } catch (const ValidationError& e) {
    throw ValidationError(f.where("head") + ": " + e.what());
  }
  try {
    m.npa.selection = selection_from_string(selection);
  } catch (const ValidationError& e) {
    throw ValidationError(f.where("selection") + ": " + e.what());
  }
  f.read("n", m.npa.n);
  f.read("refine", m.npa.refine);
  f.read("similarity_floor", m.npa.similarity_floor);
  f.read("norm_epsilon", m.npa.norm_epsilon);
  f.read("classes", m.classes);
  f.read("rank_heads", m.rank_heads);
  f.finish();
  return m;
}

json ExperimentConfig::to_json() const {
  json j{{"data", data.to_json()},
         {"model", model_to_json(model)},
         {"epochs", epochs},
         {"batch_size", batch_size},
         {"learning_rate", learning_rate},
         {"momentum", momentum},
         {"seed", seed}};
  if (alpha) j["alpha"] = *alpha;
  if (teacher_checkpoint) j["teacher_checkpoint"] = *teacher_checkpoint;
  if (!seeds.empty()) j["seeds"] = seeds;
  return j;
}

ExperimentConfig ExperimentConfig::from_json(const json& j, const std::string& path) {
  ExperimentConfig c;
  Fields f(j, path);
  if (const auto* d = f.child("data")) c.data = data_from_json(*d, join(path, "data"));
  if (const auto* m = f.child("model")) c.model = model_from_json(*m, join(path, "model"));
  f.read("epochs", c.epochs);
  f.read("batch_size", c.batch_size);
  f.read("learning_rate", c.learning_rate);
  f.read("momentum", c.momentum);
  f.read("seed", c.seed);
  f.read_optional("alpha", c.alpha);
  f.read_optional("teacher_checkpoint", c.teacher_checkpoint);
  f.read("seeds", c.seeds);
  f.finish();
  try {
    c.validate();
  } catch (const ValidationError& e) {
    if (path.empty()) throw;
    throw ValidationError(path + "." + e.what());
  }
  return c;
}

json DistillConfig::to_json() const {
  return {{"teacher", teacher.to_json()}, {"student", student.to_json()}, {"alpha", alpha}};
}

DistillConfig DistillConfig::from_json(const json& j) {
  DistillConfig c;
  Fields f(j, "");
  const auto* t = f.child("teacher");
  const auto* s = f.child("student");
  if (!t) throw ValidationError("teacher: required");
  if (!s) throw ValidationError("student: required");
  f.read("alpha", c.alpha);
  f.finish();
  c.teacher = ExperimentConfig::from_json(*t, "teacher");
  c.student = ExperimentConfig::from_json(*s, "student");
  if (!(c.alpha >= 0.0 && c.alpha <= 1.0)) throw ValidationError("alpha: must be in [0,1]");
  if (!c.teacher.seeds.empty() || !c.student.seeds.empty())
    throw ValidationError("seeds: the distillation study trains one seed per model");
  if (c.student.teacher_checkpoint) throw ValidationError("student.teacher_checkpoint: set by the study, not the config");
  return c;
}

json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return json::parse(ss.str());
  } catch (const json::parse_error& e) {
    throw ValidationError("config '" + path + "': " + e.what());
  }
}

}  // namespace brnpa
