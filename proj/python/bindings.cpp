#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "brnpa/config.hpp"
#include "brnpa/error.hpp"
#include "brnpa/metrics.hpp"
#include "brnpa/npa.hpp"
#include "brnpa/shapes.hpp"
#include "brnpa/toynet.hpp"
#include "brnpa/train.hpp"

namespace py = pybind11;
using namespace brnpa;

namespace {

using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const DoubleArray& a, std::size_t rank, const char* what) {
  if (static_cast<std::size_t>(a.ndim()) != rank)
    throw ShapeError(std::string(what) + " must have rank " + std::to_string(rank) + ", got " +
                     std::to_string(a.ndim()));
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor::from(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

py::array_t<double> to_array(const std::vector<std::size_t>& shape, const std::vector<double>& values) {
  py::array_t<double> out(shape);
  std::copy(values.begin(), values.end(), out.mutable_data());
  return out;
}

AttentionStack stack_from(const DoubleArray& maps) {
  const Tensor t = to_tensor(maps, 3, "attention");
  AttentionStack s;
  s.height = t.dim(1);
  s.width = t.dim(2);
  s.weights = t.value_vector();
  const std::size_t p = s.height * s.width;
  for (std::size_t k = 0; k < t.dim(0); ++k) {
    const auto begin = s.weights.begin() + static_cast<std::ptrdiff_t>(k * p);
    s.selected.push_back(
        static_cast<std::size_t>(std::max_element(begin, begin + static_cast<std::ptrdiff_t>(p)) - begin));
    s.fallback.push_back(false);
  }
  return s;
}

py::dict extract(const DoubleArray& volume, std::size_t n, const std::string& selection, bool refine,
                 std::uint64_t seed, double similarity_floor, double norm_epsilon) {
  NpaConfig cfg;
  cfg.n = n;
  cfg.selection = selection_from_string(selection);
  cfg.refine = refine;
  cfg.seed = seed;
  cfg.similarity_floor = similarity_floor;
  cfg.norm_epsilon = norm_epsilon;
  const FeatureVolume v(to_tensor(volume, 3, "volume"));
  const auto r = extract_representatives(v, cfg);
  py::dict out;
  out["features"] = to_array({n, v.channels()}, r.features.value_vector());
  out["attention"] = to_array({n, v.height(), v.width()}, r.attention.weights);
  out["selected"] = r.attention.selected;
  out["fallback"] = r.attention.fallback;
  out["scores_at_selection"] = r.scores_at_selection;
  return out;
}

py::dict sample_arrays(const std::vector<ShapeSample>& split, std::size_t size) {
  py::array_t<double> images({split.size(), size, size});
  py::array_t<std::uint8_t> masks({split.size(), size, size});
  py::array_t<std::int64_t> labels(std::vector<py::ssize_t>{static_cast<py::ssize_t>(split.size())});
  for (std::size_t i = 0; i < split.size(); ++i) {
    std::copy(split[i].image.begin(), split[i].image.end(), images.mutable_data() + i * size * size);
    std::copy(split[i].mask.begin(), split[i].mask.end(), masks.mutable_data() + i * size * size);
    labels.mutable_data()[i] = static_cast<std::int64_t>(split[i].label);
  }
  py::dict out;
  out["images"] = images;
  out["masks"] = masks;
  out["labels"] = labels;
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Non-parametric attention: representative-vector extraction and tooling";
  m.attr("__version__") = BRNPA_VERSION;

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ShapeError>(m, "ShapeError", base);
  py::register_exception<ValidationError>(m, "ValidationError", base);
  py::register_exception<IoError>(m, "IoError", base);
  py::register_exception<FormatError>(m, "FormatError", base);
  py::register_exception<AssertionFailure>(m, "AssertionFailure", base);
  py::register_exception<DivergenceError>(m, "DivergenceError", base);

  m.def("extract_representatives", &extract, py::arg("volume"), py::arg("n") = 3, py::arg("selection") = "active",
        py::arg("refine") = true, py::arg("seed") = 0, py::arg("similarity_floor") = 0.0,
        py::arg("norm_epsilon") = 1e-12,
        "Extract n representative vectors from a C x H x W volume.\n\n"
        "Returns a dict with features (n x C), attention (n x H x W), selected, fallback\n"
        "and scores_at_selection.");

  m.def(
      "similarity_map",
      [](const DoubleArray& volume, std::size_t ref, double similarity_floor, double norm_epsilon) {
        const FeatureVolume v(to_tensor(volume, 3, "volume"));
        return to_array({v.height(), v.width()},
                        similarity_map(v, ref, similarity_floor, norm_epsilon).value_vector());
      },
      py::arg("volume"), py::arg("ref"), py::arg("similarity_floor") = 0.0, py::arg("norm_epsilon") = 1e-12);

  m.def(
      "sparsity",
      [](const DoubleArray& attention, const DoubleArray& volume) {
        const auto r = sparsity(stack_from(attention), FeatureVolume(to_tensor(volume, 3, "volume")));
        py::dict out;
        out["s"] = r.s;
        out["a_max"] = r.a_max;
        out["a_mean"] = r.a_mean;
        return out;
      },
      py::arg("attention"), py::arg("volume"));

  m.def(
      "render",
      [](const DoubleArray& attention, const DoubleArray& volume) {
        const Image img = render(stack_from(attention), FeatureVolume(to_tensor(volume, 3, "volume")));
        py::array_t<std::uint8_t> out({img.height, img.width, std::size_t{3}});
        std::copy(img.rgb.begin(), img.rgb.end(), out.mutable_data());
        return out;
      },
      py::arg("attention"), py::arg("volume"), "Rank-to-colour rendering: maps 1/2/3 become red/green/blue.");

  m.def(
      "distillation_loss",
      [](const DoubleArray& student, const DoubleArray& teacher, const std::vector<std::size_t>& labels,
         double alpha) {
        const auto r = distillation_loss(to_tensor(student, 2, "student"), to_tensor(teacher, 2, "teacher"), labels,
                                         alpha);
        return py::make_tuple(r.total.item(), r.cross_entropy, r.kl);
      },
      py::arg("student"), py::arg("teacher"), py::arg("labels"), py::arg("alpha"),
      "Returns (total, cross_entropy, kl), each a batch mean.");

  m.def(
      "generate_shapes",
      [](std::uint64_t seed, std::size_t train, std::size_t test, std::size_t image_size, double max_clutter) {
        ShapesSpec spec;
        spec.seed = seed;
        spec.train = train;
        spec.test = test;
        spec.image_size = image_size;
        spec.max_clutter = max_clutter;
        const auto ds = generate_shapes(spec);
        py::dict out;
        out["train"] = sample_arrays(ds.train, ds.image_size);
        out["test"] = sample_arrays(ds.test, ds.image_size);
        out["classes"] = std::vector<std::string>{class_name(0), class_name(1), class_name(2)};
        return out;
      },
      py::arg("seed") = 0, py::arg("train") = 300, py::arg("test") = 150, py::arg("image_size") = 32,
      py::arg("max_clutter") = 1.0);

  m.def(
      "train",
      [](const std::string& config_json) {
        nlohmann::json j;
        try {
          j = nlohmann::json::parse(config_json);
        } catch (const nlohmann::json::parse_error& e) {
          throw ValidationError(std::string("config: ") + e.what());
        }
        const auto cfg = ExperimentConfig::from_json(j);
        TrainResult r = [&] {
          py::gil_scoped_release release;
          return train(cfg, generate_shapes(cfg.data));
        }();
        py::list log;
        for (const auto& e : r.log) log.append(e.to_json().dump());
        py::dict out;
        out["test_accuracy"] = r.test_accuracy;
        out["log"] = log;
        out["grad_groups"] = r.grad_groups;
        out["grad_norm_variance"] = r.grad_norm_variance;
        out["head_accuracies"] = r.head_accuracies;
        return out;
      },
      py::arg("config_json"), "Train from a JSON config string; log entries are JSON strings.");
}
