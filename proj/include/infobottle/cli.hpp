#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "infobottle/attack.hpp"
#include "infobottle/corpus.hpp"
#include "infobottle/evaluator.hpp"
#include "infobottle/model.hpp"
#include "infobottle/trainer.hpp"

namespace infobottle {

// Every key a config file may set, across all subcommands.
struct RunConfig {
  CorpusConfig corpus;
  std::uint64_t corpus_seed = 0;
  ModelConfig model;
  TrainConfig train;
  WordSubConfig attack;
  MIAnalysisConfig mi;

  void register_fields(FieldRegistry& reg);
  void validate() const;
};

// Exit codes of run().
inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitRuntime = 2;

// Entry point of the command-line tool. `args` excludes the program name;
// args[0] is the subcommand.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace infobottle
