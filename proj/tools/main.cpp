#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "cemssl/harness.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Train and evaluate multi-solution inverse kinematics models"};
  app.require_subcommand(1);

  std::string config_path, checkpoint_path;
  auto* run = app.add_subcommand("run", "run the pipeline named in a config file");
  run->add_option("config", config_path, "experiment config")->required();

  auto* evaluate = app.add_subcommand("evaluate", "measure the precision of a saved model");
  evaluate->add_option("checkpoint", checkpoint_path, "model checkpoint")->required();
  evaluate->add_option("config", config_path, "experiment config (arm and evaluation settings)")->required();

  auto* inspect = app.add_subcommand("inspect", "print a checkpoint header");
  inspect->add_option("checkpoint", checkpoint_path, "model checkpoint")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? cemssl::kExitOk : cemssl::kExitConfig;
  }

  if (*run) return cemssl::run_config_file(config_path, std::cout, std::cerr);
  if (*evaluate) return cemssl::run_config_file(config_path, std::cout, std::cerr, checkpoint_path);
  try {
    std::cout << cemssl::describe_checkpoint(cemssl::load_checkpoint(checkpoint_path));
  } catch (const cemssl::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return cemssl::exit_code_for(e);
  }
  return cemssl::kExitOk;
}
