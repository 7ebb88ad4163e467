#include <iostream>

#include <CLI11.hpp>

#include "pinmt/experiment.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Synthetic-task NMT experiments with a frozen or lightly tuned masked-LM encoder"};
  std::string task, config_file;
  std::vector<std::string> overrides;
  app.add_option("task", task, "gen-data | pretrain-plm | train | dual-train | eval | ablate")->required();
  app.add_option("--config", config_file, "key=value config file");
  app.add_option("overrides", overrides, "key=value overrides applied after the config file");
  app.footer("PINMT_OUT overrides the output root (paths.out).");
  CLI11_PARSE(app, argc, argv);
  try {
    pinmt::RunConfig cfg;
    if (!config_file.empty()) cfg.parse_file(config_file);
    for (const auto& o : overrides) cfg.apply_override(o);
    cfg.set("task", task);
    pinmt::run_task(cfg, std::cout);
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "pinmt: error: " << e.what() << "\n";
    return 1;
  }
}
