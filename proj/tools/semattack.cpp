#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "semattack/pipeline.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Semantic adversarial attacks on synthetic face verification"};
  app.require_subcommand(1);
  std::string config;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  app.add_option("--config", config, "JSON config file (defaults fill in missing fields)");
  app.add_option("--set", overrides, "Override a field: key.path=value")->take_all();
  app.add_option("--seed", seed, "Master seed");
  for (const char* name : {"generate", "train", "rank", "attack", "evaluate", "report", "all"}) {
    app.add_subcommand(name)->fallthrough();
  }
  app.fallthrough();
  CLI11_PARSE(app, argc, argv);

  semattack::RunConfig cfg = [&] {
    try {
      return semattack::RunConfig::load(
          config.empty() ? std::nullopt : std::optional<std::filesystem::path>(config), overrides,
          seed);
    } catch (const semattack::ConfigError& e) {
      std::cerr << "error: " << e.what() << '\n';
      std::exit(1);
    }
  }();
  const std::string command = app.get_subcommands().front()->get_name();
  return semattack::run_command(command, cfg, std::cout, std::cerr);
}
