#include "hjblab/cli.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <sstream>

using namespace hjblab;

int main(int argc, char** argv) {
  CLI::App app{"Ergodic risk-sensitive control experiments"};
  std::string pipeline, config, out;
  std::optional<std::uint64_t> seed;
  int threads = 1;
  bool overwrite = false;
  app.add_option("pipeline", pipeline, "Pipeline to run")->required()->check(CLI::IsMember(cli::pipeline_names()));
  app.add_option("--config", config, "Config file (key=value with [block] headers)")->required();
  app.add_option("--out", out, "Output directory (overrides output.dir)");
  app.add_option("--seed", seed, "Base seed (overrides simulation.seed)");
  app.add_option("--threads", threads, "Worker threads for Monte-Carlo stages")->check(CLI::PositiveNumber);
  app.add_flag("--overwrite", overwrite, "Replace the contents of a non-empty output directory");
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  std::ifstream in(config);
  if (!in) {
    std::cerr << "error: cannot read config '" << config << "'\n";
    return 2;
  }
  std::stringstream text;
  text << in.rdbuf();

  cli::ExperimentConfig cfg;
  try {
    cfg = cli::validate(text.str(), {cli::pipeline_from_string(pipeline), seed});
  } catch (const cli::ConfigError& e) {
    for (const auto& issue : e.issues()) std::cerr << "error: " << issue << "\n";
    return 2;
  }
  if (out.empty()) {
    if (!cfg.out_dir) {
      std::cerr << "error: no output directory; pass --out or set output.dir\n";
      return 2;
    }
    out = *cfg.out_dir;
  }

  try {
    const auto r = cli::run(cfg, {out, overwrite, threads});
    for (const auto& st : r.report["stages"]) {
      std::cout << st["name"].get<std::string>() << ": " << st["status"].get<std::string>();
      if (!st["error"].is_null()) std::cout << " (" << st["error"].get<std::string>() << ")";
      if (!st["reason"].is_null()) std::cout << " (" << st["reason"].get<std::string>() << ")";
      std::cout << "\n";
      for (const auto& v : st["verdicts"])
        if (!v["pass"].get<bool>()) std::cout << "  failed: " << v["invariant"].get<std::string>() << "\n";
    }
    std::cout << "verdict: " << r.report["verdict"].get<std::string>() << "\n";
    return r.exit_code;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.kind() == ErrorKind::Validation ? 2 : 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}
