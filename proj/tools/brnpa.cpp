// brnpa: command-line front end. Every run writes <out-dir>/manifest.json with
// the resolved arguments, config and tool version.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "brnpa/error.hpp"
#include "brnpa/experiments.hpp"
#include "brnpa/io.hpp"
#include "brnpa/metrics.hpp"
#include "brnpa/npa.hpp"
#include "brnpa/shapes.hpp"
#include "brnpa/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace brnpa;

namespace {

enum Exit { kOk = 0, kIo = 2, kValidation = 3, kAssertion = 4, kDivergence = 5 };

struct Globals {
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::string out_dir = "brnpa-out";
  std::string config;
};

struct Run {
  std::string command;
  json arguments = json::object();
  json config = nullptr;
  std::vector<std::string> outputs;
  std::vector<std::string> failed_assertions;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

void emit(Run& run, const Globals& g, const std::string& name, const std::string& text) {
  write_text(fs::path(g.out_dir) / name, text);
  run.outputs.push_back(name);
}

void write_manifest(const Run& run, const Globals& g) {
  json m{{"tool", "brnpa"},
         {"version", BRNPA_VERSION},
         {"command", run.command},
         {"seed", g.seed},
         {"arguments", run.arguments},
         {"config", run.config},
         {"outputs", run.outputs},
         {"failed_assertions", run.failed_assertions}};
  write_text(fs::path(g.out_dir) / "manifest.json", m.dump(2) + "\n");
}

io::Array read_any_volume(const std::string& path, std::size_t batch_index) {
  const auto bytes = io::read_file(path);
  static const std::uint8_t npy_magic[6] = {0x93, 'N', 'U', 'M', 'P', 'Y'};
  if (bytes.size() >= 6 && std::equal(npy_magic, npy_magic + 6, bytes.begin())) {
    auto a = io::decode_npy(bytes);
    return a.shape.size() == 4 ? io::batch_item(a, batch_index) : a;
  }
  return io::decode_volume(bytes);
}

AttentionStack read_stack(const std::string& path) {
  const auto a = io::read_volume(path);
  AttentionStack s;
  s.height = a.shape[1];
  s.width = a.shape[2];
  s.weights = a.values;
  const std::size_t p = s.height * s.width;
  for (std::size_t k = 0; k < a.shape[0]; ++k) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < p; ++i)
      if (s.weights[k * p + i] > s.weights[k * p + best]) best = i;
    s.selected.push_back(best);
    s.fallback.push_back(false);
  }
  return s;
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

ExperimentConfig experiment_config(const Globals& g, Run& run) {
  if (g.config.empty()) throw ValidationError("--config is required for " + run.command);
  auto cfg = ExperimentConfig::from_json(load_json_file(g.config));
  if (g.seed_given) {
    cfg.seed = g.seed;
    cfg.seeds.clear();
  }
  run.config = cfg.to_json();
  return cfg;
}

void save_run(Run& run, const Globals& g, const std::string& prefix, const ExperimentConfig& cfg,
              const TrainResult& r) {
  const std::string dir = prefix.empty() ? "" : prefix + "/";
  if (!prefix.empty()) fs::create_directories(fs::path(g.out_dir) / prefix);
  emit(run, g, dir + "metrics.jsonl", r.log_jsonl());
  io::save_checkpoint(fs::path(g.out_dir) / (dir + "model.ckpt"), r.model.to_checkpoint(cfg.to_json()));
  run.outputs.push_back(dir + "model.ckpt");
  json summary{{"test_accuracy", r.test_accuracy},
               {"grad_groups", r.grad_groups},
               {"grad_norm_variance", r.grad_norm_variance}};
  if (!r.head_accuracies.empty()) summary["head_accuracies"] = r.head_accuracies;
  emit(run, g, dir + "summary.json", summary.dump(2) + "\n");
}

void print_epoch(const EpochRecord& e) {
  std::printf("epoch %3zu  train_acc %.4f  test_acc %.4f  loss_ce %.5f  loss_kl %.5f\n", e.epoch, e.train_acc,
              e.test_acc, e.loss_ce, e.loss_kl);
  std::fflush(stdout);
}

int finish_assertions(Run& run, const std::vector<Assertion>& assertions) {
  run.failed_assertions = failed(assertions);
  for (const auto& a : assertions)
    std::printf("  [%s] %s  (%s)\n", !a.evaluated ? "skip" : a.passed ? "ok" : "FAILED", a.name.c_str(),
                a.detail.c_str());
  if (run.failed_assertions.empty()) return kOk;
  for (const auto& name : run.failed_assertions) std::fprintf(stderr, "assertion failed: %s\n", name.c_str());
  return kAssertion;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Non-parametric attention toolkit"};
  app.set_version_flag("--version", BRNPA_VERSION);
  app.require_subcommand(1);
  app.fallthrough();

  Globals g;
  app.add_option("--seed", g.seed, "Seed for every random choice; replaces a config's seed and seeds")->each([&](const std::string&) {
    g.seed_given = true;
  });
  app.add_option("--out-dir", g.out_dir, "Directory for outputs and the manifest")->capture_default_str();
  app.add_option("--config", g.config, "Experiment config (JSON)");

  // extract
  std::string ex_input;
  std::size_t ex_n = 3, ex_batch = 0;
  std::string ex_selection = "active";
  bool ex_no_refine = false;
  auto* extract = app.add_subcommand("extract", "Extract representative vectors from a feature volume");
  extract->add_option("--input", ex_input, "Volume file (.npav) or NPY array")->required();
  extract->add_option("--n", ex_n, "Number of vectors")->capture_default_str();
  extract->add_option("--selection", ex_selection, "active or random")->capture_default_str();
  extract->add_flag("--no-refine", ex_no_refine, "Skip refinement");
  extract->add_option("--batch-index", ex_batch, "Item to take from a rank-4 NPY batch")->capture_default_str();

  // render
  std::string rd_volume, rd_stack, rd_image, rd_output = "render.ppm";
  double rd_blend = 0.5;
  std::size_t rd_scale = 1;
  auto* render_cmd = app.add_subcommand("render", "Render an attention stack as RGB");
  render_cmd->add_option("--volume", rd_volume, "Feature volume file")->required();
  render_cmd->add_option("--stack", rd_stack, "Attention stack file (N x H x W)")->required();
  render_cmd->add_option("--image", rd_image, "PPM image to overlay on");
  render_cmd->add_option("--blend", rd_blend, "Overlay weight of the rendered maps")->capture_default_str();
  render_cmd->add_option("--scale", rd_scale, "Nearest-neighbour upscale factor")->capture_default_str();
  render_cmd->add_option("--output", rd_output, "Output name (.ppm or .png)")->capture_default_str();

  // sparsity
  std::string sp_volume, sp_stack;
  auto* sparsity_cmd = app.add_subcommand("sparsity", "Sparsity of an attention stack");
  sparsity_cmd->add_option("--volume", sp_volume, "Feature volume file")->required();
  sparsity_cmd->add_option("--stack", sp_stack, "Attention stack file")->required();

  // gen-data
  ShapesSpec gd;
  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic shapes dataset as NPY arrays");
  gen->add_option("--train", gd.train)->capture_default_str();
  gen->add_option("--test", gd.test)->capture_default_str();
  gen->add_option("--image-size", gd.image_size)->capture_default_str();
  gen->add_option("--max-clutter", gd.max_clutter)->capture_default_str();

  auto* train_cmd = app.add_subcommand("train", "Train a model from --config");
  auto* distill = app.add_subcommand("distill", "Teacher/student resolution study from --config");
  auto* ablate = app.add_subcommand("ablate", "Selection x refinement ablation grid from --config");
  auto* rank = app.add_subcommand("rank-heads", "Rank-subset head study from --config");

  // gradcheck
  std::size_t gc_trials = 100, gc_c = 4, gc_h = 4, gc_w = 4, gc_n = 3;
  std::string gc_selection = "active";
  bool gc_no_refine = false, gc_network = false;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  gradcheck->add_option("--trials", gc_trials)->capture_default_str();
  gradcheck->add_option("--channels", gc_c)->capture_default_str();
  gradcheck->add_option("--height", gc_h)->capture_default_str();
  gradcheck->add_option("--width", gc_w)->capture_default_str();
  gradcheck->add_option("--n", gc_n)->capture_default_str();
  gradcheck->add_option("--selection", gc_selection)->capture_default_str();
  gradcheck->add_flag("--no-refine", gc_no_refine);
  gradcheck->add_flag("--network", gc_network, "Also check small networks with every head");

  // bench
  std::vector<std::size_t> bn_shape{512, 56, 56};
  std::size_t bn_n = 3, bn_iters = 10;
  std::optional<std::size_t> bn_baseline;
  auto* bench = app.add_subcommand("bench", "Time extraction against the learned-attention head");
  bench->add_option("--shape", bn_shape, "C,H,W")->delimiter(',')->expected(3)->capture_default_str();
  bench->add_option("--n", bn_n)->capture_default_str();
  bench->add_option("--iters", bn_iters)->capture_default_str();
  bench->add_option("--baseline-iters", bn_baseline, "Iterations for the baseline (default: --iters)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kValidation;
  }

  Run run;
  int code = kOk;
  try {
    fs::create_directories(g.out_dir);
    if (extract->parsed()) {
      run.command = "extract";
      run.arguments = {{"input", ex_input}, {"n", ex_n}, {"selection", ex_selection},
                       {"refine", !ex_no_refine}, {"batch_index", ex_batch}};
      const auto array = read_any_volume(ex_input, ex_batch);
      if (array.shape.size() != 3) throw ValidationError("input must be a C x H x W volume");
      NpaConfig cfg;
      cfg.n = ex_n;
      cfg.selection = selection_from_string(ex_selection);
      cfg.refine = !ex_no_refine;
      cfg.seed = g.seed;
      const FeatureVolume volume(array.to_tensor());
      const auto reps = extract_representatives(volume, cfg);
      const auto& st = reps.attention;
      io::write_volume(fs::path(g.out_dir) / "features.npav",
                       io::Array{{1, cfg.n, volume.channels()}, reps.features.value_vector()});
      io::write_volume(fs::path(g.out_dir) / "attention.npav", io::Array{{cfg.n, st.height, st.width}, st.weights});
      run.outputs = {"features.npav", "attention.npav"};
      std::string sel, sums;
      for (std::size_t k = 0; k < st.size(); ++k) {
        double total = 0.0;
        for (double w : st.map(k)) total += w;
        sel += (k ? " " : "") + std::to_string(st.selected[k]);
        sums += (k ? " " : "") + format_double(total);
      }
      std::printf("selected: %s\nweight sums: %s\n", sel.c_str(), sums.c_str());
      if (reps.fallback_count()) std::printf("fallback picks: %zu\n", reps.fallback_count());
    } else if (render_cmd->parsed()) {
      run.command = "render";
      run.arguments = {{"volume", rd_volume}, {"stack", rd_stack}, {"image", rd_image},
                       {"blend", rd_blend},   {"scale", rd_scale}, {"output", rd_output}};
      if (rd_scale == 0) throw ValidationError("--scale must be positive");
      const FeatureVolume volume(read_any_volume(rd_volume, 0).to_tensor());
      Image img = render(read_stack(rd_stack), volume);
      if (!rd_image.empty()) {
        const Image base = read_ppm(rd_image);
        img = overlay(base, upscale_nearest(img, base.height, base.width), rd_blend);
      } else if (rd_scale > 1) {
        img = upscale_nearest(img, img.height * rd_scale, img.width * rd_scale);
      }
      const fs::path out = fs::path(g.out_dir) / rd_output;
      if (out.extension() == ".png")
        write_png(out, img);
      else
        write_ppm(out, img);
      run.outputs = {rd_output};
    } else if (sparsity_cmd->parsed()) {
      run.command = "sparsity";
      run.arguments = {{"volume", sp_volume}, {"stack", sp_stack}};
      const FeatureVolume volume(read_any_volume(sp_volume, 0).to_tensor());
      const auto report = sparsity(read_stack(sp_stack), volume);
      const std::string text = report.to_json().dump(2) + "\n";
      std::cout << text;
      emit(run, g, "sparsity.json", text);
    } else if (gen->parsed()) {
      run.command = "gen-data";
      gd.seed = g.seed;
      run.config = gd.to_json();
      const auto ds = generate_shapes(gd);
      const std::size_t s = ds.image_size;
      for (const auto& [name, split] : {std::pair{std::string("train"), &ds.train}, {std::string("test"), &ds.test}}) {
        io::Array images{{split->size(), 1, s, s}, {}}, masks{{split->size(), 1, s, s}, {}}, labels{{split->size()}, {}};
        for (const auto& smp : *split) {
          images.values.insert(images.values.end(), smp.image.begin(), smp.image.end());
          masks.values.insert(masks.values.end(), smp.mask.begin(), smp.mask.end());
          labels.values.push_back(static_cast<double>(smp.label));
        }
        for (const auto& [suffix, arr] : {std::pair{"_images.npy", &images}, {"_masks.npy", &masks}, {"_labels.npy", &labels}}) {
          const auto bytes = io::encode_npy(*arr);
          io::write_file(fs::path(g.out_dir) / (name + suffix), bytes);
          run.outputs.push_back(name + suffix);
        }
      }
      json meta{{"spec", gd.to_json()}, {"classes", {class_name(0), class_name(1), class_name(2)}}};
      emit(run, g, "dataset.json", meta.dump(2) + "\n");
      std::printf("wrote %zu train / %zu test images of %zux%zu\n", ds.train.size(), ds.test.size(), s, s);
    } else if (train_cmd->parsed()) {
      run.command = "train";
      const auto cfg = experiment_config(g, run);
      if (!cfg.seeds.empty()) throw ValidationError("seeds: train runs a single seed; use seed");
      const auto data = generate_shapes(cfg.data);
      const auto result = train(cfg, data, nullptr, print_epoch);
      save_run(run, g, "", cfg, result);
      if (result.model.spec().head != HeadKind::AvgPool) {
        NoGradGuard guard;
        const std::size_t s = cfg.model.input_size;
        for (std::size_t i = 0; i < std::min<std::size_t>(4, data.test.size()); ++i) {
          const auto& smp = data.test[i];
          const auto out = result.model.forward(image_tensor(smp, s), eval_seed(cfg.seed, i));
          const Image base = upscale_nearest(gray_to_rgb(smp.image, s, s), 4 * s, 4 * s);
          const Image maps = upscale_nearest(render(*out.attention, FeatureVolume(out.volume)), 4 * s, 4 * s);
          const std::string name = "attention_test" + std::to_string(i) + "_" + class_name(smp.label) + ".ppm";
          write_ppm(fs::path(g.out_dir) / name, overlay(base, maps, 0.6));
          run.outputs.push_back(name);
        }
      }
      std::printf("test accuracy %.4f\n", result.test_accuracy);
    } else if (distill->parsed()) {
      run.command = "distill";
      if (g.config.empty()) throw ValidationError("--config is required for distill");
      auto cfg = DistillConfig::from_json(load_json_file(g.config));
      if (g.seed_given) cfg.teacher.seed = cfg.student.seed = g.seed;
      run.config = cfg.to_json();
      if (cfg.teacher.data.to_json() != cfg.student.data.to_json())
        throw ValidationError("student.data: teacher and student must share the dataset");
      const auto data = generate_shapes(cfg.teacher.data);
      const auto report = distill_resolution_study(
          cfg, data, (fs::path(g.out_dir) / "work").string(),
          [&](const std::string& name, const ExperimentConfig& c, const TrainResult& r) {
            std::printf("%s: test accuracy %.4f\n", name.c_str(), r.test_accuracy);
            save_run(run, g, name, c, r);
          });
      emit(run, g, "report.json", report.to_json().dump(2) + "\n");
      std::printf("teacher %zux%zu acc %.4f sparsity %.3f | student %zux%zu acc %.4f sparsity %.3f\n",
                  report.teacher.map_height, report.teacher.map_width, report.teacher.test_accuracy,
                  report.teacher.sparsity.mean, report.student.map_height, report.student.map_width,
                  report.student.test_accuracy, report.student.sparsity.mean);
      for (const auto& f : report.flags) std::printf("%s\n", f.c_str());
      code = finish_assertions(run, report.assertions);
    } else if (ablate->parsed()) {
      run.command = "ablate";
      const auto cfg = experiment_config(g, run);
      const auto data = generate_shapes(cfg.data);
      const auto report = run_ablation_grid(cfg, data, [&](const std::string& name, const ExperimentConfig& c,
                                                           const TrainResult& r) {
        std::printf("%s: test accuracy %.4f\n", name.c_str(), r.test_accuracy);
        std::fflush(stdout);
        save_run(run, g, name, c, r);
      });
      emit(run, g, "report.json", report.to_json().dump(2) + "\n");
      std::printf("%-8s %-8s %s\n", "Select", "Refine", "Accuracy");
      for (const auto& r : report.rows)
        std::printf("%-8s %-8s %.4f\n", r.selection == Selection::Active ? "Active" : "Random", r.refine ? "Yes" : "No",
                    r.test_accuracy);
      std::printf("Active/Yes - Random/No = %.4f\n", report.gap);
      code = finish_assertions(run, report.assertions);
    } else if (rank->parsed()) {
      run.command = "rank-heads";
      const auto cfg = experiment_config(g, run);
      const auto data = generate_shapes(cfg.data);
      const auto report = run_rank_head_experiment(cfg, data, [&](const std::string& name, const ExperimentConfig& c,
                                                                  const TrainResult& r) { save_run(run, g, name, c, r); });
      emit(run, g, "report.json", report.to_json().dump(2) + "\n");
      for (const auto& [label, acc] : report.rows) std::printf("%-14s %.4f\n", label.c_str(), acc);
      code = finish_assertions(run, report.assertions);
    } else if (gradcheck->parsed()) {
      run.command = "gradcheck";
      run.arguments = {{"trials", gc_trials}, {"channels", gc_c}, {"height", gc_h},  {"width", gc_w},
                       {"n", gc_n},           {"selection", gc_selection},          {"refine", !gc_no_refine},
                       {"network", gc_network}};
      NpaConfig cfg;
      cfg.n = gc_n;
      cfg.selection = selection_from_string(gc_selection);
      cfg.refine = !gc_no_refine;
      GradcheckOptions opt;
      opt.seed = g.seed;
      const auto r = npa_gradcheck(gc_c, gc_h, gc_w, cfg, gc_trials, opt);
      json report{{"npa",
                   {{"requested", r.requested},
                    {"checked", r.checked},
                    {"excluded_near_tie", r.excluded_near_tie},
                    {"excluded_near_clamp", r.excluded_near_clamp},
                    {"max_relative_error", r.max_relative_error}}}};
      std::printf("npa: %zu/%zu checked, max relative error %.3e\n", r.checked, r.requested, r.max_relative_error);
      bool ok = r.checked > 0 && r.max_relative_error < 1e-4;
      if (gc_network) {
        ModelSpec spec;
        spec.input_size = 8;
        spec.channels = {3, 4, 4, 5};
        spec.strides = {2, 1, 1, 1};
        spec.npa = cfg;
        for (auto head : {HeadKind::Npa, HeadKind::LearnedAttention, HeadKind::AvgPool}) {
          spec.head = head;
          const auto n = network_gradcheck(spec, gc_trials, opt);
          report[to_string(head) + "-network"] = {{"requested", n.requested},
                                                  {"checked", n.checked},
                                                  {"excluded_kink", n.excluded_kink},
                                                  {"excluded_zero_gradient", n.excluded_zero_gradient},
                                                  {"parameters", n.parameters},
                                                  {"max_relative_error", n.max_relative_error}};
          std::printf("%s network: %zu/%zu checked, max relative error %.3e\n", to_string(head).c_str(), n.checked,
                      n.requested, n.max_relative_error);
          ok = ok && n.checked > 0 && n.max_relative_error < 1e-4;
        }
      }
      emit(run, g, "gradcheck.json", report.dump(2) + "\n");
      if (!ok) run.failed_assertions.push_back("max relative error < 1e-4 on checked trials");
      code = ok ? kOk : kAssertion;
    } else if (bench->parsed()) {
      run.command = "bench";
      run.arguments = {{"shape", bn_shape}, {"n", bn_n}, {"iters", bn_iters}};
      if (bn_baseline) run.arguments["baseline_iters"] = *bn_baseline;
      const auto report = run_bench(bn_shape[0], bn_shape[1], bn_shape[2], bn_n, bn_iters, g.seed, bn_baseline);
      const std::string text = report.to_json().dump(2) + "\n";
      emit(run, g, "bench.json", text);
      std::cout << text;
    }
    write_manifest(run, g);
  } catch (const FormatError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kIo;
  } catch (const IoError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kIo;
  } catch (const fs::filesystem_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kIo;
  } catch (const ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kValidation;
  } catch (const ShapeError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kValidation;
  } catch (const AssertionFailure& e) {
    std::fprintf(stderr, "assertion failed: %s\n", e.what());
    return kAssertion;
  } catch (const DivergenceError& e) {
    std::fprintf(stderr, "diverged: %s\n", e.what());
    return kDivergence;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return code;
}
