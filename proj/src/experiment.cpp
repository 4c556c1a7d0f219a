#include "tempo/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include "tempo/checkpoint.hpp"
#include "tempo/error.hpp"
#include "tempo/serialize.hpp"

namespace tempo {

namespace fs = std::filesystem;
using Json = nlohmann::json;

void ExperimentConfig::validate() const {
  task.validate();
  tempering.validate();
  trainer.validate();
  if (temperatures.empty()) throw ConfigError("temperatures: at least one value required");
  for (double t : temperatures) {
    if (!(t > 0.0) || !std::isfinite(t)) throw ConfigError("temperatures: values must be positive and finite");
  }
  if (beam_sizes.empty() || length_penalties.empty()) throw ConfigError("beam grid must not be empty");
  for (auto b : beam_sizes) {
    if (b == 0) throw ConfigError("beam_sizes: values must be >= 1");
  }
  for (double a : length_penalties) {
    if (!(a >= 0.0)) throw ConfigError("length_penalties: values must be >= 0");
  }
  if (decode_max_length == 0) throw ConfigError("decode_max_length must be positive");
  if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
}

Json to_json(const ExperimentConfig& cfg) {
  return Json{{"task", cfg.task},
              {"model", cfg.model},
              {"tempering", cfg.tempering},
              {"trainer", cfg.trainer},
              {"temperatures", cfg.temperatures},
              {"beam_sizes", cfg.beam_sizes},
              {"length_penalties", cfg.length_penalties},
              {"decode_max_length", cfg.decode_max_length},
              {"model_seed", cfg.model_seed},
              {"output_dir", cfg.output_dir.generic_string()}};
}

ExperimentConfig experiment_from_json(const Json& doc) {
  if (!doc.is_object()) throw ConfigError("config: expected a JSON object");
  ExperimentConfig cfg;
  for (const auto& [key, value] : doc.items()) {
    try {
      if (key == "task") {
        cfg.task = value.get<SyntheticTaskSpec>();
      } else if (key == "model") {
        cfg.model = value.get<ModelConfig>();
      } else if (key == "tempering") {
        cfg.tempering = value.get<TemperingConfig>();
      } else if (key == "trainer") {
        cfg.trainer = value.get<TrainerConfig>();
      } else if (key == "temperatures") {
        cfg.temperatures = value.get<std::vector<double>>();
      } else if (key == "beam_sizes") {
        cfg.beam_sizes = value.get<std::vector<std::size_t>>();
      } else if (key == "length_penalties") {
        cfg.length_penalties = value.get<std::vector<double>>();
      } else if (key == "decode_max_length") {
        cfg.decode_max_length = value.get<std::size_t>();
      } else if (key == "model_seed") {
        cfg.model_seed = value.get<std::uint64_t>();
      } else if (key == "output_dir") {
        cfg.output_dir = value.get<std::string>();
      } else {
        throw ConfigError("config: unknown key '" + key + "'");
      }
    } catch (const Json::exception& e) {
      throw ConfigError("config." + key + ": " + e.what());
    }
  }
  return cfg;
}

void apply_override(Json& doc, const std::string& dotted_key, const std::string& value) {
  if (dotted_key.empty()) throw ConfigError("override: empty key");
  Json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = dotted_key.find('.', start);
    const std::string part = dotted_key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("override: malformed key '" + dotted_key + "'");
    if (!node->is_object()) throw ConfigError("override: '" + dotted_key + "' descends into a non-object");
    if (dot == std::string::npos) {
      Json parsed = Json::parse(value, nullptr, false);
      (*node)[part] = parsed.is_discarded() ? Json(value) : parsed;
      return;
    }
    node = &(*node)[part];
    if (node->is_null()) *node = Json::object();
    start = dot + 1;
  }
}

ExperimentConfig load_experiment_config(const std::optional<fs::path>& path, std::span<const std::string> overrides,
                                        bool no_dropout) {
  Json doc = to_json(ExperimentConfig{});
  if (path) {
    std::ifstream in(*path);
    if (!in) throw ConfigError("cannot open config " + path->string());
    Json file = Json::parse(in, nullptr, false);
    if (file.is_discarded()) throw ConfigError("config " + path->string() + " is not valid JSON");
    (void)experiment_from_json(file);
    doc.merge_patch(file);
  }
  for (const auto& ov : overrides) {
    const auto eq = ov.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + ov + "' must look like key=value");
    apply_override(doc, ov.substr(0, eq), ov.substr(eq + 1));
  }
  ExperimentConfig cfg = experiment_from_json(doc);
  if (no_dropout) cfg.model.disable_dropout();
  cfg.validate();
  return cfg;
}

std::string fnv1a_hex(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

std::string config_hash(const ExperimentConfig& cfg) {
  Json doc = to_json(cfg);
  // Where results land does not change them.
  doc.erase("output_dir");
  return fnv1a_hex(doc.dump());
}

PreparedData prepare_data(const SyntheticTaskSpec& task) {
  PreparedData d;
  d.corpus = generate_synthetic_corpus(task);
  std::vector<std::string> tags;
  for (auto kind : task.multilingual_kinds) tags.push_back(target_tag(kind));
  d.source_vocab = Vocabulary::build(d.corpus.train, Side::kSource, tags);
  d.target_vocab = Vocabulary::build(d.corpus.train, Side::kTarget);
  d.train = encode_corpus(d.corpus.train, d.source_vocab, d.target_vocab);
  d.dev = encode_corpus(d.corpus.dev, d.source_vocab, d.target_vocab);
  d.test = encode_corpus(d.corpus.test, d.source_vocab, d.target_vocab);
  return d;
}

namespace {

void write_json_file(const Json& j, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

Json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  Json j = Json::parse(in, nullptr, false);
  if (j.is_discarded()) throw DataError(path.string() + " is not valid JSON");
  return j;
}

std::string fmt(double x, int precision = 4) {
  if (!std::isfinite(x)) return "nan";
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << x;
  return os.str();
}

void write_data_dir(const PreparedData& data, const fs::path& dir) {
  fs::create_directories(dir);
  write_corpus(data.corpus.train, dir / "train.src", dir / "train.tgt");
  write_corpus(data.corpus.dev, dir / "dev.src", dir / "dev.tgt");
  write_corpus(data.corpus.test, dir / "test.src", dir / "test.tgt");
  data.source_vocab.save(dir / "vocab.src");
  data.target_vocab.save(dir / "vocab.tgt");
}

template <class T>
double median(std::vector<T> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? static_cast<double>(v[n / 2]) : 0.5 * (static_cast<double>(v[n / 2 - 1]) + static_cast<double>(v[n / 2]));
}

}  // namespace

RunOutcome run_training(const ExperimentConfig& cfg, const PreparedData& data, const fs::path& run_dir) {
  cfg.validate();
  ModelConfig mc = cfg.model;
  mc.source_vocab = data.source_vocab.size();
  mc.target_vocab = data.target_vocab.size();
  mc.validate();

  ExperimentConfig effective = cfg;
  effective.model = mc;
  const std::string hash = config_hash(effective);

  TrainingResult res = train(TransformerModel::init(mc, cfg.model_seed), TrainingData{data.train, data.dev},
                             cfg.tempering, cfg.trainer);
  Checkpoint averaged = average_checkpoints(res.checkpoints);
  RunOutcome out{averaged.model(), std::move(res.record), 0.0, hash};
  if (!data.dev.empty()) out.dev_greedy_bleu = evaluate_checkpoint(out.model, data.dev, cfg.decode_max_length);

  if (!run_dir.empty()) {
    fs::create_directories(run_dir / "checkpoints");
    write_json_file(Json{{"config_hash", hash}, {"config", to_json(effective)}}, run_dir / "config.json");
    write_data_dir(data, run_dir / "data");
    for (const auto& c : res.checkpoints) {
      save_checkpoint(c, run_dir / "checkpoints" / ("step-" + std::to_string(c.step) + ".ckpt"));
    }
    save_checkpoint(averaged, run_dir / "averaged.ckpt");
    out.record.write_jsonl(run_dir / "record.jsonl");
    {
      std::ofstream rec(run_dir / "record.jsonl", std::ios::app);
      rec << Json{{"type", "config"}, {"config_hash", hash}}.dump() << '\n';
    }
    write_json_file(Json{{"config_hash", hash},
                         {"temperature", cfg.tempering.temperature},
                         {"final_step", out.record.final_step},
                         {"stopped_early", out.record.stopped_early},
                         {"averaged_steps", averaged.averaged_steps},
                         {"dev_greedy_bleu", out.dev_greedy_bleu}},
                    run_dir / "run.json");
  }
  return out;
}

DecodedSet decode_all(const TransformerModel& model, std::span<const EncodedPair> pairs, std::size_t beam_size,
                      double alpha, std::size_t max_length) {
  DecodedSet out;
  out.outputs.reserve(pairs.size());
  const auto started = std::chrono::steady_clock::now();
  for (const auto& p : pairs) {
    const auto t0 = std::chrono::steady_clock::now();
    Hypothesis best;
    if (beam_size == 0) {
      best = greedy_decode(model, p.source, max_length);
    } else {
      best = beam_decode(model, p.source, BeamConfig{beam_size, alpha, max_length}).front();
    }
    const auto t1 = std::chrono::steady_clock::now();
    out.nanoseconds.push_back(std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count());
    out.outputs.push_back(strip_special(best.tokens));
    out.best.push_back(std::move(best));
  }
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return out;
}

std::vector<TokenIds> references_of(std::span<const EncodedPair> pairs) {
  std::vector<TokenIds> refs;
  refs.reserve(pairs.size());
  for (const auto& p : pairs) refs.push_back(strip_special(p.target));
  return refs;
}

BeamGridResult beam_grid(const TransformerModel& model, std::span<const EncodedPair> pairs,
                         std::span<const std::size_t> beam_sizes, std::span<const double> alphas,
                         std::size_t max_length) {
  const auto refs = references_of(pairs);
  BeamGridResult r;
  bool have = false;
  for (auto b : beam_sizes) {
    for (double a : alphas) {
      const auto dec = decode_all(model, pairs, b, a, max_length);
      GridPoint pt{b, a, corpus_bleu(dec.outputs, refs)};
      r.points.push_back(pt);
      if (!have || pt.bleu > r.best.bleu) {
        r.best = pt;
        have = true;
      }
    }
  }
  return r;
}

SweepReport run_sweep(const ExperimentConfig& base, std::span<const double> temperatures, const fs::path& out_dir) {
  if (temperatures.empty()) throw ConfigError("sweep: at least one temperature required");
  base.validate();
  SweepReport report;
  report.config_hash = config_hash(base);
  const PreparedData data = prepare_data(base.task);

  // Phase 1: training and dev evaluation only.
  std::vector<std::optional<RunOutcome>> runs;
  for (double t : temperatures) {
    SweepRow row;
    row.temperature = t;
    try {
      ExperimentConfig cfg = base;
      cfg.tempering.temperature = t;
      const fs::path dir = out_dir.empty() ? fs::path{} : out_dir / ("T" + fmt(t, 2));
      RunOutcome run = run_training(cfg, data, dir);
      row.ok = true;
      row.dev_greedy_bleu = run.dev_greedy_bleu;
      row.final_step = run.record.final_step;
      runs.emplace_back(std::move(run));
    } catch (const std::exception& e) {
      row.error = e.what();
      runs.emplace_back(std::nullopt);
    }
    report.rows.push_back(row);
  }

  // Phase 2: T_opt from dev scores; lower temperature wins ties.
  for (const auto& row : report.rows) {
    if (!row.ok) continue;
    if (!report.t_opt) {
      report.t_opt = row.temperature;
      continue;
    }
    const auto& cur = *std::find_if(report.rows.begin(), report.rows.end(),
                                    [&](const SweepRow& r) { return r.ok && r.temperature == *report.t_opt; });
    if (row.dev_greedy_bleu > cur.dev_greedy_bleu ||
        (row.dev_greedy_bleu == cur.dev_greedy_bleu && row.temperature < cur.temperature)) {
      report.t_opt = row.temperature;
    }
  }

  // Phase 3: test decoding.
  const auto refs = references_of(data.test);
  for (std::size_t i = 0; i < report.rows.size(); ++i) {
    SweepRow& row = report.rows[i];
    if (!row.ok) continue;
    try {
      const TransformerModel& model = runs[i]->model;
      const auto greedy = decode_all(model, data.test, 0, 0.0, base.decode_max_length);
      row.test_greedy_bleu = corpus_bleu(greedy.outputs, refs);
      row.oracle_beam = beam_grid(model, data.test, base.beam_sizes, base.length_penalties, base.decode_max_length).best;
      const auto beam4 = decode_all(model, data.test, 4, 1.0, base.decode_max_length);
      row.similarity_bleu = output_similarity_bleu(greedy.outputs, beam4.outputs);
    } catch (const std::exception& e) {
      row.ok = false;
      row.error = e.what();
    }
  }

  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    write_sweep_csv(report, out_dir / "sweep.csv");
    std::ofstream s(out_dir / "sweep_summary.txt");
    s << "config_hash " << report.config_hash << '\n';
    s << "t_opt " << (report.t_opt ? fmt(*report.t_opt, 2) : std::string("none")) << '\n';
    for (const auto& row : report.rows) {
      s << "T=" << fmt(row.temperature, 2) << ' ' << (row.ok ? "ok" : "failed: " + row.error) << '\n';
    }
  }
  return report;
}

void write_sweep_csv(const SweepReport& report, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "temperature,dev_greedy_bleu,test_greedy_bleu,oracle_beam_bleu,oracle_beam_size,oracle_alpha,"
         "similarity_bleu,final_step,is_t_opt,status,config_hash\n";
  for (const auto& r : report.rows) {
    std::string status = r.ok ? "ok" : "failed: " + r.error;
    std::replace(status.begin(), status.end(), ',', ';');
    std::replace(status.begin(), status.end(), '\n', ' ');
    out << fmt(r.temperature, 2) << ',' << fmt(r.dev_greedy_bleu) << ',' << fmt(r.test_greedy_bleu) << ','
        << fmt(r.oracle_beam.bleu) << ',' << r.oracle_beam.beam_size << ',' << fmt(r.oracle_beam.alpha, 1) << ','
        << fmt(r.similarity_bleu) << ',' << r.final_step << ','
        << (report.t_opt && *report.t_opt == r.temperature ? 1 : 0) << ',' << status << ',' << report.config_hash
        << '\n';
  }
}

std::vector<TimingRow> measure_decode_timing(const TransformerModel& model, std::span<const EncodedPair> pairs,
                                             std::span<const std::size_t> beam_sizes, std::size_t passes,
                                             std::size_t max_length) {
  if (passes == 0) throw ConfigError("timing: passes must be >= 1");
  auto time_it = [&](std::size_t beam) {
    std::vector<double> secs;
    for (std::size_t p = 0; p < passes; ++p) secs.push_back(decode_all(model, pairs, beam, 1.0, max_length).seconds);
    return median(secs);
  };
  (void)decode_all(model, pairs, 0, 0.0, max_length);  // warm-up
  std::vector<TimingRow> rows;
  const double greedy = time_it(0);
  rows.push_back({"greedy", 1, greedy, 1.0});
  for (auto b : beam_sizes) {
    const double t = time_it(b);
    rows.push_back({"beam", b, t, greedy > 0.0 ? t / greedy : std::nan("")});
  }
  return rows;
}

namespace {

struct LoadedRun {
  fs::path dir;
  std::string name;
  double temperature = std::nan("");
  std::string hash;
  std::size_t max_length = 64;
  std::optional<ExperimentRecord> record;
  std::optional<TransformerModel> model;
  std::vector<EncodedPair> test;
};

LoadedRun load_run(const fs::path& dir, std::vector<std::string>& gaps) {
  LoadedRun r;
  r.dir = dir;
  r.name = dir.filename().string();
  if (r.name.empty()) r.name = dir.parent_path().filename().string();
  auto gap = [&](const std::string& what) { gaps.push_back(r.name + ": " + what); };

  try {
    const Json j = read_json_file(dir / "config.json");
    const ExperimentConfig cfg = experiment_from_json(j.at("config"));
    r.hash = j.value("config_hash", "");
    r.temperature = cfg.tempering.temperature;
    r.max_length = cfg.decode_max_length;
  } catch (const std::exception& e) {
    gap(std::string("config unavailable (") + e.what() + ")");
  }
  try {
    r.record = ExperimentRecord::read_jsonl(dir / "record.jsonl");
  } catch (const std::exception& e) {
    gap(std::string("record unavailable (") + e.what() + ")");
  }
  try {
    r.model = load_checkpoint(dir / "averaged.ckpt").model();
  } catch (const std::exception& e) {
    gap(std::string("averaged checkpoint unavailable (") + e.what() + ")");
  }
  try {
    const auto src = Vocabulary::load(dir / "data" / "vocab.src");
    const auto tgt = Vocabulary::load(dir / "data" / "vocab.tgt");
    r.test = encode_corpus(read_corpus(dir / "data" / "test.src", dir / "data" / "test.tgt"), src, tgt);
  } catch (const std::exception& e) {
    gap(std::string("test data unavailable (") + e.what() + ")");
  }
  return r;
}

double late_mean(const ExperimentRecord& rec, double StepRecord::*field) {
  const std::size_t n = rec.steps.size();
  double sum = 0.0;
  std::size_t k = 0;
  for (std::size_t i = n - n / 4; i < n; ++i) {
    const double v = rec.steps[i].*field;
    if (std::isfinite(v)) {
      sum += v;
      ++k;
    }
  }
  return k ? sum / static_cast<double>(k) : std::nan("");
}

}  // namespace

AnalysisReport run_analysis(std::span<const fs::path> run_dirs, const fs::path& out_dir,
                            const AnalysisOptions& options) {
  if (run_dirs.empty()) throw ConfigError("analyze: at least one run directory required");
  AnalysisReport report;
  std::vector<LoadedRun> runs;
  for (const auto& d : run_dirs) runs.push_back(load_run(d, report.gaps));
  std::stable_sort(runs.begin(), runs.end(),
                   [](const LoadedRun& a, const LoadedRun& b) { return a.temperature < b.temperature; });

  std::string hashes;
  for (const auto& r : runs) hashes += r.hash + ";";
  const std::string hash = fnv1a_hex(hashes);

  fs::create_directories(out_dir);
  std::ofstream entropy(out_dir / "entropy_curves.csv");
  std::ofstream grads(out_dir / "grad_norm_curves.csv");
  std::ofstream timing(out_dir / "timing.csv");
  std::ofstream sim(out_dir / "similarity.csv");
  if (!entropy || !grads || !timing || !sim) throw DataError("cannot write into " + out_dir.string());
  entropy << "temperature,run,step,tempered_entropy,raw_entropy,config_hash\n";
  grads << "temperature,run,step,grad_norm,config_hash\n";
  timing << "temperature,run,decoder,beam_size,median_seconds,speedup,config_hash\n";
  sim << "temperature,run,greedy_bleu,beam4_bleu,similarity_bleu,config_hash\n";

  std::ostringstream summary;
  summary << "analysis config_hash " << hash << "\n";
  summary << "runs " << runs.size() << "\n\n";
  summary << "run  T  late_tempered_entropy  late_raw_entropy  late_grad_norm  similarity_bleu\n";

  for (auto& r : runs) {
    const std::string t = fmt(r.temperature, 2);
    double late_t = std::nan(""), late_r = std::nan(""), late_g = std::nan(""), similarity = std::nan("");
    if (r.record) {
      if (r.record->steps.empty()) report.gaps.push_back(r.name + ": record has no step entries");
      for (const auto& s : r.record->steps) {
        entropy << t << ',' << r.name << ',' << s.step << ',' << fmt(s.tempered_entropy, 6) << ','
                << fmt(s.raw_entropy, 6) << ',' << r.hash << '\n';
        grads << t << ',' << r.name << ',' << s.step << ',' << fmt(s.grad_norm, 6) << ',' << r.hash << '\n';
      }
      if (!r.record->steps.empty()) {
        late_t = late_mean(*r.record, &StepRecord::tempered_entropy);
        late_r = late_mean(*r.record, &StepRecord::raw_entropy);
        late_g = late_mean(*r.record, &StepRecord::grad_norm);
      }
    }
    if (r.model && !r.test.empty()) {
      const std::size_t max_len = r.max_length;
      const auto refs = references_of(r.test);
      const auto greedy = decode_all(*r.model, r.test, 0, 0.0, max_len);
      const auto beam4 = decode_all(*r.model, r.test, 4, 1.0, max_len);
      similarity = output_similarity_bleu(greedy.outputs, beam4.outputs);
      sim << t << ',' << r.name << ',' << fmt(corpus_bleu(greedy.outputs, refs)) << ','
          << fmt(corpus_bleu(beam4.outputs, refs)) << ',' << fmt(similarity) << ',' << r.hash << '\n';
      if (options.timing) {
        for (const auto& row : measure_decode_timing(*r.model, r.test, options.timing_beams, options.timing_passes,
                                                     max_len)) {
          timing << t << ',' << r.name << ',' << row.decoder << ',' << row.beam_size << ','
                 << fmt(row.median_seconds, 6) << ',' << fmt(row.speedup, 3) << ',' << r.hash << '\n';
        }
      }
    }
    summary << r.name << "  " << t << "  " << fmt(late_t) << "  " << fmt(late_r) << "  " << fmt(late_g) << "  "
            << fmt(similarity, 2) << '\n';
  }
  if (!options.timing) report.gaps.push_back("timing disabled");
  summary << "\ntiming: batch size 1, warm cache, median of " << options.timing_passes
          << " passes over the test set; see timing.csv\n";
  if (report.gaps.empty()) {
    summary << "gaps: none\n";
  } else {
    summary << "gaps:\n";
    for (const auto& g : report.gaps) summary << "  - " << g << '\n';
  }
  report.summary = summary.str();
  std::ofstream(out_dir / "summary.txt") << report.summary;
  return report;
}

Json bleu_report(std::span<const TokenIds> hypotheses, std::span<const TokenIds> references, const std::string& hash) {
  return Json{{"metric", "bleu"},
              {"value", corpus_bleu(hypotheses, references)},
              {"n_sentences", hypotheses.size()},
              {"config_hash", hash}};
}

Json significance_report(const BootstrapResult& r, std::size_t n_sentences, const std::string& hash) {
  return Json{{"metric", "paired_bootstrap"},
              {"bleu_a", r.bleu_a},
              {"bleu_b", r.bleu_b},
              {"p_value", r.p_value},
              {"tie_fraction", r.tie_fraction},
              {"resamples", r.resamples},
              {"seed", r.seed},
              {"n_sentences", n_sentences},
              {"config_hash", hash}};
}

}  // namespace tempo
