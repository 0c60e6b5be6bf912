#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ndlab/cli.hpp"

using namespace ndlab;

int main(int argc, char** argv) {
  CLI::App app{"Stream-diversity experiments: theory, training, diversity, corruption, cost"};
  app.set_version_flag("--version", std::string(cli::version()));

  std::string config_path;
  std::string manifest_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir = ".";
  std::size_t threads = 1;
  std::vector<std::string> overrides;
  std::string checkpoint;
  bool amortize = false;

  app.add_option("--config", config_path, "key=value configuration file")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "root seed");
  app.add_option("--out-dir", out_dir, "directory for artifacts and manifest.txt");
  app.add_option("--threads", threads, "worker threads (results do not depend on it)")
      ->check(CLI::PositiveNumber);
  app.add_option("--set", overrides, "override a config key, key=value");
  app.add_option("--manifest", manifest_path, "replay the run recorded in a manifest")
      ->check(CLI::ExistingFile);
  app.require_subcommand(0, 1);

  app.add_subcommand("theory", "bound curve, P* and Monte-Carlo certification")->fallthrough();
  app.add_subcommand("train", "pretrain a backbone, attach streams and train one arm")->fallthrough();
  auto* div = app.add_subcommand("diversity", "D_spec report for a checkpoint or fresh model");
  div->fallthrough();
  div->add_option("--checkpoint", checkpoint, "model checkpoint");
  auto* cor = app.add_subcommand("corrupt", "paired stream-corruption evaluation");
  cor->fallthrough();
  cor->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  auto* cost = app.add_subcommand("cost", "training-cost table");
  cost->fallthrough();
  cost->add_flag("--amortize", amortize, "add the lifecycle column");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return cli::kExitUsage;
  }

  try {
    cli::RunRequest req;
    if (!manifest_path.empty()) {
      const cli::RunManifest m = cli::RunManifest::load(manifest_path);
      req = cli::replay_request(m, out_dir);
      if (!app.get_subcommands().empty() && app.get_subcommands()[0]->get_name() != m.subcommand) {
        throw cli::UsageError("manifest records '" + m.subcommand + "', not '" +
                              app.get_subcommands()[0]->get_name() + "'");
      }
    } else {
      if (app.get_subcommands().empty()) throw cli::UsageError("a subcommand is required (see --help)");
      req.subcommand = app.get_subcommands()[0]->get_name();
      if (!config_path.empty()) req.config = KvConfig::load(config_path);
      // A manifest passed as --config keeps its root seed.
      req.seed = req.config.get_u64("manifest.seed", 0);
      req.out_dir = out_dir;
    }
    if (seed) req.seed = *seed;
    req.threads = threads;
    for (const auto& o : overrides) req.config.apply_override(o);
    if (!checkpoint.empty()) req.config.set(req.subcommand + ".checkpoint", checkpoint);
    if (amortize) req.config.set("cost.amortize", true);

    const cli::RunOutcome out = cli::run(req, std::cout);
    std::cout << "manifest: " << (req.out_dir / "manifest.txt").string() << "\n";
    return out.exit_code;
  } catch (const cli::UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return cli::kExitUsage;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return cli::kExitUsage;
  }
}
