#include "tempo/cli.hpp"

#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "tempo/checkpoint.hpp"
#include "tempo/error.hpp"
#include "tempo/experiment.hpp"

namespace tempo {

namespace fs = std::filesystem;
using Json = nlohmann::json;

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return kExitConfig;
  if (dynamic_cast<const DataError*>(&e)) return kExitData;
  if (dynamic_cast<const NumericError*>(&e)) return kExitNumeric;
  return kExitFailure;
}

namespace {

struct ConfigArgs {
  std::string config;
  std::vector<std::string> overrides;
  bool no_dropout = false;
  std::string output;

  void attach(CLI::App* cmd) {
    cmd->add_option("-c,--config", config, "JSON experiment config");
    cmd->add_option("--set", overrides, "Override a dotted key, e.g. --set tempering.temperature=2");
    cmd->add_flag("--no-dropout", no_dropout, "Zero all three dropout rates");
    cmd->add_option("-o,--output", output, "Output directory (defaults to output_dir from the config)");
  }

  ExperimentConfig load() const {
    std::optional<fs::path> path;
    if (!config.empty()) path = config;
    ExperimentConfig cfg = load_experiment_config(path, overrides, no_dropout);
    if (!output.empty()) cfg.output_dir = output;
    return cfg;
  }
};

std::vector<TokenIds> read_token_file(const fs::path& path, std::map<std::string, int>& ids) {
  std::vector<TokenIds> out;
  for (const auto& sentence : read_sentences(path)) {
    TokenIds seq;
    for (const auto& tok : sentence) seq.push_back(ids.emplace(tok, static_cast<int>(ids.size())).first->second);
    out.push_back(std::move(seq));
  }
  return out;
}

std::string file_digest(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return fnv1a_hex(os.str());
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Softmax-tempering seq2seq lab"};
  app.require_subcommand(1);

  ConfigArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "Train one model and write a run directory");
  train_args.attach(train_cmd);

  ConfigArgs sweep_args;
  std::vector<double> sweep_temps;
  auto* sweep_cmd = app.add_subcommand("sweep", "Train across temperatures, pick T_opt on dev, score test");
  sweep_args.attach(sweep_cmd);
  sweep_cmd->add_option("-t,--temperatures", sweep_temps, "Temperature grid (defaults to the config's)")
      ->delimiter(',');

  std::string ckpt, src_vocab, tgt_vocab, input, output;
  std::size_t beam = 0, max_length = 64;
  double alpha = 1.0;
  auto* decode_cmd = app.add_subcommand("decode", "Decode a source file with a checkpoint");
  decode_cmd->add_option("--checkpoint", ckpt, "Checkpoint file")->required();
  decode_cmd->add_option("--source-vocab", src_vocab, "Source vocabulary file")->required();
  decode_cmd->add_option("--target-vocab", tgt_vocab, "Target vocabulary file")->required();
  decode_cmd->add_option("-i,--input", input, "Source sentences, one per line")->required();
  decode_cmd->add_option("-o,--output", output, "Hypothesis file; a .jsonl sidecar is written next to it")
      ->required();
  decode_cmd->add_option("-b,--beam", beam, "Beam size, 0 for greedy");
  decode_cmd->add_option("-a,--alpha", alpha, "Length penalty exponent");
  decode_cmd->add_option("--max-length", max_length, "Generation limit");

  std::vector<std::string> run_dirs;
  std::string analysis_out;
  bool no_timing = false;
  std::size_t passes = 3;
  auto* analyze_cmd = app.add_subcommand("analyze", "Curves, timing table and similarity for trained runs");
  analyze_cmd->add_option("runs", run_dirs, "Run directories written by train or sweep")->required();
  analyze_cmd->add_option("-o,--output", analysis_out, "Report directory")->required();
  analyze_cmd->add_flag("--no-timing", no_timing, "Skip decode timing");
  analyze_cmd->add_option("--passes", passes, "Timed passes per decoder");

  std::string hyp, hyp_b, ref, report_out;
  std::size_t resamples = 1000;
  std::uint64_t seed = 1;
  auto* report_cmd = app.add_subcommand("report", "BLEU score report, or a paired significance report");
  report_cmd->add_option("--hyp", hyp, "System A hypotheses")->required();
  report_cmd->add_option("--ref", ref, "References")->required();
  report_cmd->add_option("--hyp-b", hyp_b, "System B hypotheses; switches to a significance report");
  report_cmd->add_option("--resamples", resamples, "Bootstrap resamples");
  report_cmd->add_option("--seed", seed, "Bootstrap seed");
  report_cmd->add_option("-o,--output", report_out, "Write the report here as well as to stdout");

  std::vector<char*> argv;
  std::vector<std::string> storage = args.empty() ? std::vector<std::string>{"tempo"} : args;
  for (auto& a : storage) argv.push_back(a.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*train_cmd) {
      const ExperimentConfig cfg = train_args.load();
      const PreparedData data = prepare_data(cfg.task);
      const RunOutcome run = run_training(cfg, data, cfg.output_dir);
      out << Json{{"command", "train"},
                  {"run_dir", cfg.output_dir.generic_string()},
                  {"temperature", cfg.tempering.temperature},
                  {"final_step", run.record.final_step},
                  {"stopped_early", run.record.stopped_early},
                  {"dev_greedy_bleu", run.dev_greedy_bleu},
                  {"config_hash", run.config_hash}}
                 .dump()
          << '\n';
    } else if (*sweep_cmd) {
      ExperimentConfig cfg = sweep_args.load();
      if (!sweep_temps.empty()) cfg.temperatures = sweep_temps;
      cfg.validate();
      const SweepReport rep = run_sweep(cfg, cfg.temperatures, cfg.output_dir);
      std::size_t failed = 0;
      for (const auto& r : rep.rows) failed += r.ok ? 0 : 1;
      out << Json{{"command", "sweep"},
                  {"output_dir", cfg.output_dir.generic_string()},
                  {"t_opt", rep.t_opt ? Json(*rep.t_opt) : Json(nullptr)},
                  {"runs", rep.rows.size()},
                  {"failed", failed},
                  {"config_hash", rep.config_hash}}
                 .dump()
          << '\n';
      if (failed == rep.rows.size()) return kExitFailure;
    } else if (*decode_cmd) {
      const Checkpoint c = load_checkpoint(ckpt);
      const TransformerModel model = c.model();
      const Vocabulary sv = Vocabulary::load(src_vocab);
      const Vocabulary tv = Vocabulary::load(tgt_vocab);
      if (sv.size() != model.config().source_vocab || tv.size() != model.config().target_vocab) {
        throw DataError("vocabulary sizes do not match the checkpoint");
      }
      std::vector<EncodedPair> pairs;
      for (const auto& s : read_sentences(input)) {
        EncodedPair p;
        p.source = sv.encode(s);
        p.source.push_back(kEosId);
        pairs.push_back(std::move(p));
      }
      const DecodedSet dec = decode_all(model, pairs, beam, alpha, max_length);
      const std::string hash =
          fnv1a_hex(file_digest(ckpt) + file_digest(input) + Json{{"beam", beam}, {"alpha", alpha},
                                                                  {"max_length", max_length}}.dump());
      std::ofstream hyp_out(output);
      std::ofstream side(output + ".jsonl");
      if (!hyp_out || !side) throw DataError("cannot write " + output);
      for (std::size_t i = 0; i < dec.outputs.size(); ++i) {
        hyp_out << join_tokens(tv.decode(dec.outputs[i])) << '\n';
        side << Json{{"line", i},
                     {"score", dec.best[i].score},
                     {"log_prob", dec.best[i].log_prob},
                     {"length", dec.outputs[i].size()},
                     {"finished", dec.best[i].finished},
                     {"nanoseconds", dec.nanoseconds[i]},
                     {"config_hash", hash}}
                    .dump()
             << '\n';
      }
      out << Json{{"command", "decode"}, {"sentences", dec.outputs.size()}, {"seconds", dec.seconds},
                  {"config_hash", hash}}
                 .dump()
          << '\n';
    } else if (*analyze_cmd) {
      std::vector<fs::path> dirs(run_dirs.begin(), run_dirs.end());
      AnalysisOptions opts;
      opts.timing = !no_timing;
      opts.timing_passes = passes;
      const AnalysisReport rep = run_analysis(dirs, analysis_out, opts);
      out << rep.summary;
    } else if (*report_cmd) {
      std::map<std::string, int> ids;
      const auto a = read_token_file(hyp, ids);
      const auto r = read_token_file(ref, ids);
      Json rep;
      if (hyp_b.empty()) {
        rep = bleu_report(a, r, fnv1a_hex(file_digest(hyp) + file_digest(ref)));
      } else {
        const auto b = read_token_file(hyp_b, ids);
        const std::string hash = fnv1a_hex(file_digest(hyp) + file_digest(hyp_b) + file_digest(ref) +
                                           std::to_string(resamples) + ":" + std::to_string(seed));
        rep = significance_report(paired_bootstrap(a, b, r, resamples, seed), a.size(), hash);
      }
      out << rep.dump(2) << '\n';
      if (!report_out.empty()) {
        std::ofstream f(report_out);
        if (!f) throw DataError("cannot write " + report_out);
        f << rep.dump(2) << '\n';
      }
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return exit_code_for(e);
  }
  return kExitOk;
}

}  // namespace tempo
