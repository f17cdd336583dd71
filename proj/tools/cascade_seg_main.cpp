#include <cstdio>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "cascade/config.hpp"
#include "cascade/errors.hpp"
#include "cascade/threading.hpp"
#include "cascade/workflows.hpp"

namespace {

// sysexits-style codes so scripts can tell flag, config, and I/O failures
// apart.
constexpr int kExitUsage = 64;
constexpr int kExitSoftware = 70;
constexpr int kExitIo = 74;
constexpr int kExitConfig = 78;

struct CliArgs {
  std::string command;
  std::string config_path;
  std::string out_root = ".";
  std::vector<std::string> sets;
  int threads = 0;  // 0 = CASCADE_SEG_THREADS, else hardware concurrency
};

std::size_t resolve_threads(int flag_value) {
  if (flag_value > 0) return static_cast<std::size_t>(flag_value);
  if (const char* env = std::getenv("CASCADE_SEG_THREADS")) {
    const long n = std::strtol(env, nullptr, 10);
    if (n > 0) return static_cast<std::size_t>(n);
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw > 0 ? hw : 1;
}

int dispatch(const CliArgs& args) {
  nlohmann::json cfg = cascade::load_run_config(args.config_path);
  for (const std::string& kv : args.sets) cascade::apply_override(cfg, kv);
  cascade::validate_run_config(cfg);
  cascade::set_workers(resolve_threads(args.threads));

  const cascade::WorkflowPaths paths =
      cascade::resolve_paths(cfg, args.out_root);
  if (args.command == "gen-data") cascade::run_gen_data(cfg, paths);
  else if (args.command == "train-liver") cascade::run_train_liver(cfg, paths);
  else if (args.command == "train-lesion") cascade::run_train_lesion(cfg, paths);
  else if (args.command == "train-detector") cascade::run_train_detector(cfg, paths);
  else if (args.command == "predict") cascade::run_predict(cfg, paths);
  else if (args.command == "refine-crf") cascade::run_refine_crf(cfg, paths);
  else if (args.command == "evaluate") cascade::run_evaluate(cfg, paths);
  else if (args.command == "ablate") cascade::run_ablate(cfg, paths);
  else if (args.command == "overlay") cascade::run_overlay(cfg, paths);
  else throw cascade::UsageError("unknown subcommand: " + args.command);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cascade-seg: cascaded liver/lesion segmentation workflows"};
  app.require_subcommand(1);

  CliArgs args;
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"gen-data", "generate a synthetic phantom dataset"},
      {"train-liver", "train the liver segmentation net"},
      {"train-lesion", "train the lesion segmentation net"},
      {"train-detector", "train the sliding-window lesion detector"},
      {"predict", "run the full pipeline over a dataset split"},
      {"refine-crf", "apply dense-CRF refinement to a probability volume"},
      {"evaluate", "score predictions against ground truth"},
      {"ablate", "train everything and emit the four-row ablation report"},
      {"overlay", "render per-slice PPM overlays of truth and predictions"},
  };
  for (const auto& [name, desc] : commands) {
    CLI::App* sub = app.add_subcommand(name, desc);
    sub->add_option("--config", args.config_path, "run config JSON")
        ->required();
    sub->add_option("--out", args.out_root, "run root directory");
    sub->add_option("--set", args.sets,
                    "dotted-path config override (key=value), repeatable");
    sub->add_option("--threads", args.threads, "worker thread cap");
    sub->callback([&args, name = name] { args.command = name; });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitUsage;  // --help exits 0
  }

  try {
    return dispatch(args);
  } catch (const cascade::UsageError& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return kExitUsage;
  } catch (const cascade::ConfigError& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return kExitConfig;
  } catch (const cascade::IoError& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return kExitIo;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return kExitSoftware;
  }
}
