// Pinned training examples: NPA accuracy floor, the random/no-refine gap and
// the gradient-norm variance of NPA next to the learned-attention head
// (reported only).

#include <cstdio>
#include <filesystem>
#include <fstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "brnpa/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace brnpa;

int main(int argc, char** argv) {
  CLI::App app{"Pinned training examples"};
  std::string config = "configs/train_npa.json", out = "pinned-out";
  double floor = 0.90;
  app.add_option("--config", config)->capture_default_str();
  app.add_option("--out-dir", out)->capture_default_str();
  app.add_option("--min-accuracy", floor, "Accuracy floor for the pinned NPA run")->capture_default_str();
  CLI11_PARSE(app, argc, argv);

  const auto base = ExperimentConfig::from_json(load_json_file(config));
  const auto data = generate_shapes(base.data);

  auto weak = base;
  weak.model.npa.selection = Selection::Random;
  weak.model.npa.refine = false;
  auto learned = base;
  learned.model.head = HeadKind::LearnedAttention;

  json report;
  std::vector<TrainResult> results;
  for (const auto& [name, cfg] : {std::pair{"npa", base}, {"random-no-refine", weak}, {"learned-attention", learned}}) {
    auto r = train(cfg, data);
    json groups;
    for (std::size_t g = 0; g < r.grad_groups.size(); ++g) groups[r.grad_groups[g]] = r.grad_norm_variance[g];
    report[name] = {{"test_accuracy", r.test_accuracy}, {"grad_norm_variance", groups}};
    std::printf("%-18s test accuracy %.4f\n", name, r.test_accuracy);
    results.push_back(std::move(r));
  }

  int failures = 0;
  auto check = [&](bool ok, const std::string& what) {
    std::printf("%s %s\n", ok ? "PASS" : "FAIL", what.c_str());
    failures += !ok;
  };
  char buf[128];
  std::snprintf(buf, sizeof buf, "npa accuracy %.4f >= %.2f", results[0].test_accuracy, floor);
  check(results[0].test_accuracy >= floor, buf);
  std::snprintf(buf, sizeof buf, "random/no-refine %.4f < npa %.4f", results[1].test_accuracy, results[0].test_accuracy);
  check(results[1].test_accuracy < results[0].test_accuracy, buf);

  std::printf("grad-norm variance (npa vs learned-attention):\n");
  for (std::size_t g = 0; g < results[0].grad_groups.size(); ++g)
    std::printf("  %-8s %.4e  %.4e\n", results[0].grad_groups[g].c_str(), results[0].grad_norm_variance[g],
                results[2].grad_norm_variance[g]);

  fs::create_directories(out);
  std::ofstream(fs::path(out) / "pinned_examples.json") << report.dump(2) << "\n";
  return failures == 0 ? 0 : 1;
}
