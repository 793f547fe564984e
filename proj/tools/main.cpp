#include <iostream>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"

#include "idam/cli.hpp"

namespace {

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> overrides;  // key=value
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "JSON config file; keys match the documented schema");
  cmd->add_option("--set", args.overrides,
                  "override one config key as key=value (repeatable)");
}

idam::RunConfig resolve(const CommonArgs& args) {
  idam::RunConfig cfg = args.config_path.empty()
                            ? idam::RunConfig{}
                            : idam::RunConfig::from_json_file(args.config_path);
  for (const std::string& kv : args.overrides) {
    const size_t eq = kv.find('=');
    if (eq == std::string::npos || eq == 0)
      throw std::invalid_argument("--set expects key=value, got '" + kv + "'");
    cfg.set_from_string(kv.substr(0, eq), kv.substr(eq + 1));
  }
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"iterative point cloud registration toolkit"};
  app.require_subcommand(1);

  CommonArgs gen_args, train_args, reg_args, bench_args, self_args;
  std::string src_path, tgt_path;

  CLI::App* gen = app.add_subcommand("gen-data", "generate synthetic registration pairs");
  add_common(gen, gen_args);

  CLI::App* train = app.add_subcommand("train", "train a registration model");
  add_common(train, train_args);

  CLI::App* reg = app.add_subcommand("register", "align one source/target cloud pair");
  add_common(reg, reg_args);
  reg->add_option("source", src_path, "source cloud (xyz text)")->required();
  reg->add_option("target", tgt_path, "target cloud (xyz text)")->required();

  CLI::App* bench = app.add_subcommand("benchmark", "evaluate methods over a test set");
  add_common(bench, bench_args);

  CLI::App* self = app.add_subcommand("selftest", "run quick property checks");
  add_common(self, self_args);

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) idam::cmd_gen_data(resolve(gen_args));
    if (train->parsed()) idam::cmd_train(resolve(train_args));
    if (reg->parsed()) idam::cmd_register(resolve(reg_args), src_path, tgt_path);
    if (bench->parsed()) idam::cmd_benchmark(resolve(bench_args));
    if (self->parsed()) idam::cmd_selftest(resolve(self_args));
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
