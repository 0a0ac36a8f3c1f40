#include <CLI11.hpp>
#include <iostream>

#include "qssm/commands.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Quantization-aware training for state-space image restoration"};
  app.require_subcommand(1);
  qssm::cli::Options opts;
  std::string config, out, checkpoint, hr, lr, packed;
  std::vector<int> bits;

  for (const char* name : {"train", "eval", "export", "stats"}) {
    auto* sub = app.add_subcommand(name);
    sub->add_option("--config", config, "key = value config file");
    sub->add_option("--task", opts.task, "classic_sr | light_sr | denoise | jpeg_car");
    sub->add_option("--bits", bits, "weight and activation bits (32 32 = full precision)")->expected(2);
    sub->add_option("--scale", opts.scale, "SR scale factor");
    sub->add_flag("--desk", opts.desk, "desk-scale schedule: 2000 iterations, milestones x0.1");
    sub->add_option("--seed", opts.seed);
    sub->add_option("--out", out, "output directory (train) or file");
    sub->add_option("--checkpoint", checkpoint);
    sub->add_option("--hr", hr, "HR image directory");
    sub->add_option("--lr", lr, "LR image directory paired by file stem");
    sub->add_option("--packed", packed, "eval with weights from a packed container");
    sub->add_option("--sites", opts.sites, "activation site substring, '*' for all");
    sub->add_option("--iters", opts.iterations);
    sub->add_option("--method", opts.method, "qssm | static");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  if (!config.empty()) opts.config = config;
  if (!out.empty()) opts.out = out;
  if (!checkpoint.empty()) opts.checkpoint = checkpoint;
  if (!hr.empty()) opts.hr_dir = hr;
  if (!lr.empty()) opts.lr_dir = lr;
  if (!packed.empty()) opts.packed = packed;
  if (bits.size() == 2) opts.bits = std::make_pair(bits[0], bits[1]);
  return qssm::cli::run(app.get_subcommands().front()->get_name(), opts, std::cout, std::cerr);
}
