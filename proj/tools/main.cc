// robustlens command-line driver.

#include <iostream>

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "cli_common.h"
#include "robustlens/parallel.h"

int main(int argc, char** argv) {
  rl::tune_allocator();
  CLI::App root{"Train, attack, explain and visualise small robust classifiers"};
  root.require_subcommand(1);
  bool quiet = false;
  root.add_flag("-q,--quiet", quiet, "Only log warnings and errors");

  rl::cli::CommandList commands;
  rl::cli::register_data_commands(root, commands);
  rl::cli::register_train_commands(root, commands);
  rl::cli::register_explain_commands(root, commands);
  rl::cli::register_viz_commands(root, commands);
  rl::cli::register_metric_commands(root, commands);

  try {
    root.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return root.exit(e);
  } catch (const CLI::ParseError& e) {
    root.exit(e);
    return rl::cli::kExitConfig;
  }
  // Results go to stdout; logs must not interleave with them.
  spdlog::set_default_logger(spdlog::stderr_color_mt("robustlens"));
  spdlog::set_level(quiet ? spdlog::level::warn : spdlog::level::info);

  for (const auto& command : commands) {
    if (!command->parsed()) continue;
    try {
      command->run(command->resolve());
      return rl::cli::kExitOk;
    } catch (const rl::ConfigError& e) {
      spdlog::error("config error: {}", e.what());
      return rl::cli::kExitConfig;
    } catch (const rl::DimensionError& e) {
      spdlog::error("config error: {}", e.what());
      return rl::cli::kExitConfig;
    } catch (const rl::IndexError& e) {
      spdlog::error("config error: {}", e.what());
      return rl::cli::kExitConfig;
    } catch (const std::exception& e) {
      spdlog::error("{}", e.what());
      return rl::cli::kExitRuntime;
    }
  }
  // A command group (e.g. `dataset`) without a leaf subcommand.
  std::cerr << root.help() << '\n';
  return rl::cli::kExitConfig;
}
