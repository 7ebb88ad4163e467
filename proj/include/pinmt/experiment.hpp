#pragma once

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <string>
#include <vector>

#include "pinmt/config.hpp"
#include "pinmt/training.hpp"

namespace pinmt {

namespace fs = std::filesystem;

struct ResultRow {
  std::string run_id, config_hash, direction;
  double bleu = std::nan("");
  double loss_ce = std::nan(""), loss_align = std::nan(""), loss_total = std::nan("");
  std::size_t steps = 0;
  std::uint64_t seed = 0;
  double wall_time_s = 0;

  static std::string header() {
    return "run_id,config_hash,direction,bleu,loss_ce,loss_align,loss_total,steps,seed,wall_time_s";
  }

  static std::string num(double x) {
    if (std::isnan(x)) return "nan";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
  }

  std::string csv() const {
    return run_id + ',' + config_hash + ',' + direction + ',' + num(bleu) + ',' + num(loss_ce) + ',' +
           num(loss_align) + ',' + num(loss_total) + ',' + std::to_string(steps) + ',' + std::to_string(seed) + ',' +
           num(wall_time_s);
  }

  /// Every field except the wall-clock time.
  std::string reproducible_part() const { return csv().substr(0, csv().rfind(',')); }
};

struct ResultsLocked : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Append-only results CSV guarded by "<file>.lock" for the lifetime of the
/// object. A second writer fails to create the lock and is rejected.
class ResultsLog {
 public:
  explicit ResultsLog(fs::path path) : path_(std::move(path)), lock_(path_.string() + ".lock") {
    if (path_.has_parent_path()) fs::create_directories(path_.parent_path());
    const int fd = ::open(lock_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) {
      if (errno == EEXIST)
        throw ResultsLocked("results file " + path_.string() + " is locked by another run (" + lock_.string() +
                            " exists)");
      throw std::runtime_error("cannot create lock " + lock_.string() + ": " + std::strerror(errno));
    }
    const auto pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] auto n = ::write(fd, pid.data(), pid.size());
    ::close(fd);
    if (fs::exists(path_) && fs::file_size(path_) > 0) {
      std::ifstream in(path_);
      std::string first;
      std::getline(in, first);
      if (first != ResultRow::header()) {
        release();
        throw std::runtime_error(path_.string() + " does not start with the results header");
      }
    }
  }
  ResultsLog(const ResultsLog&) = delete;
  ResultsLog& operator=(const ResultsLog&) = delete;
  ~ResultsLog() { release(); }

  void append(const ResultRow& row) {
    const bool fresh = !fs::exists(path_) || fs::file_size(path_) == 0;
    std::ofstream out(path_, std::ios::app);
    if (!out) throw std::runtime_error("cannot append to " + path_.string());
    if (fresh) out << ResultRow::header() << '\n';
    out << row.csv() << '\n';
    if (!out) throw std::runtime_error("short write to " + path_.string());
  }

  const fs::path& path() const { return path_; }

 private:
  void release() {
    if (held_) {
      std::error_code ec;
      fs::remove(lock_, ec);
      held_ = false;
    }
  }

  fs::path path_, lock_;
  bool held_ = true;
};

struct RunPaths {
  fs::path out, data, plm, ckpt, results;
};

/// Relative paths live under the output root; PINMT_OUT replaces paths.out.
inline RunPaths resolve_paths(const RunConfig& c) {
  RunPaths p;
  p.out = c.str("paths.out");
  if (const char* env = std::getenv("PINMT_OUT"); env && *env) p.out = env;
  auto under = [&](const std::string& key) {
    fs::path v = c.str(key);
    return v.is_absolute() ? v : p.out / v;
  };
  p.data = under("paths.data");
  p.plm = under("paths.plm");
  p.ckpt = under("paths.ckpt");
  p.results = under("paths.results");
  return p;
}

inline std::string run_id_for(const RunConfig& c) { return c.str("task") + "-" + c.hash().substr(0, 12); }

// ---------------------------------------------------------------------------
// Config to library types

inline SynthTaskSpec synth_spec(const RunConfig& c) {
  SynthTaskSpec s;
  s.frequent_words = c.count("data.frequent_words");
  s.rare_words = c.count("data.rare_words");
  s.branching = c.count("data.branching");
  s.min_len = c.count("data.min_len");
  s.max_len = c.count("data.max_len");
  s.reorder = reorder_from_name(c.str("data.reorder"));
  s.parallel_pairs = c.count("data.pairs");
  s.monolingual = c.count("data.monolingual");
  s.alias_rate_mono = c.num("data.alias_rate_mono");
  s.alias_rate_eval = c.num("data.alias_rate_eval");
  s.rare_trace = c.count("data.rare_trace");
  s.seed = c.count("data.seed");
  return s;
}

inline ScheduleSpec schedule_spec(const RunConfig& c, const std::string& lr_key, const std::string& warmup_key) {
  ScheduleSpec s;
  s.base = c.num(lr_key);
  s.warmup = c.count(warmup_key);
  s.beta1 = c.num("beta1");
  s.beta2 = c.num("beta2");
  return s;
}

inline PlmDims plm_dims(const RunConfig& c, std::size_t vocab) {
  PlmDims d;
  d.vocab = vocab;
  d.d_plm = c.count("d_plm");
  d.heads = c.count("plm.heads");
  d.ffn = c.count("plm.ffn");
  d.layers = c.count("layers.plm");
  d.max_len = c.count("max_len");
  return d;
}

/// converter=none builds the plain Transformer.
inline ModelSpec model_spec(const RunConfig& c, std::size_t vocab) {
  ModelSpec m;
  m.nmt.vocab = vocab;
  m.nmt.d_model = c.count("d_model");
  m.nmt.heads = c.count("heads");
  m.nmt.ffn = c.count("ffn");
  m.nmt.enc_layers = c.count("layers.enc");
  m.nmt.dec_layers = c.count("layers.dec");
  m.nmt.max_len = c.count("max_len");
  m.plm = plm_dims(c, vocab);
  m.use_plm = c.str("converter") != "none";
  if (m.use_plm) m.converter = converter_from_name(c.str("converter"));
  m.fusion = fusion_from_name(c.str("fusion"));
  m.align.kind = align_kind_from_name(c.str("alignment.kind"));
  m.align.site = align_site_from_name(c.str("alignment.site"));
  m.align.alpha = c.num("alignment.alpha");
  m.align.sign_mode = sign_mode_from_name(c.str("alignment.sign_mode"));
  m.align.alpha_norm = alpha_norm_from_name(c.str("alignment.alpha_norm"));
  m.align.use_final_plm_layer = c.flag("alignment.plm_final_layer");
  m.keep_prob = c.num("keep_prob");
  m.include_plm_embedding = c.flag("plm.include_embedding");
  m.dropout = c.num("dropout");
  m.label_smoothing = c.num("label_smoothing");
  m.validate();
  return m;
}

inline TrainConfig train_config(const RunConfig& c) {
  TrainConfig t;
  t.steps = c.count("steps");
  t.max_tokens = c.count("max_tokens");
  t.accumulate = c.count("accumulate");
  t.schedule = schedule_spec(c, "lr", "warmup");
  t.rho = c.num("rho");
  t.seed = c.count("seed");
  t.valid_every = c.count("valid_every");
  t.validate();
  return t;
}

inline DecodeConfig decode_config(const RunConfig& c) {
  DecodeConfig d;
  d.width = c.count("beam.width");
  d.penalty = c.num("beam.penalty");
  return d;
}

inline bool use_double(const RunConfig& c) {
  const auto& p = c.str("precision");
  if (p != "float" && p != "double") throw ConfigError("precision must be float or double, got '" + p + "'");
  return p == "double";
}

// ---------------------------------------------------------------------------
// Data

struct TaskData {
  Vocab vocab;
  ParallelCorpus train, valid, test;
};

inline Direction direction_from_name(const std::string& s) {
  if (s == "fwd") return Direction::fwd;
  if (s == "rev") return Direction::rev;
  throw ConfigError("direction must be fwd or rev, got '" + s + "'");
}

inline TaskData load_task_data(const fs::path& dir, Direction dir_kind) {
  if (!fs::exists(dir / "vocab.txt")) throw std::runtime_error("no corpus in " + dir.string() + " (run gen-data first)");
  TaskData d;
  d.vocab = Vocab::load(dir / "vocab.txt");
  auto load = [&](const std::string& split) {
    auto pairs = read_parallel(dir, split);
    if (dir_kind == Direction::rev)
      for (auto& p : pairs) std::swap(p.source, p.target);
    return encode_pairs(pairs, d.vocab);
  };
  d.train = load("train");
  d.valid = load("valid");
  d.test = load("test");
  return d;
}

/// Loads the "plm.*" parameters, converting between stored widths if needed.
template <class T>
void load_pretrained_plm(PinmtModel<T>& model, const fs::path& path) {
  if (!fs::exists(path)) throw std::runtime_error("no PLM checkpoint at " + path.string() + " (run pretrain-plm first)");
  auto ck = load_checkpoint(path);
  ck.value_bytes = sizeof(T);
  restore_params(model.store, ck, "plm.");
  model.clear_plm_cache();
}

inline double tail_mean(const std::vector<TraceRow>& trace, double TraceRow::*field) {
  if (trace.empty()) return std::nan("");
  const std::size_t tail = std::max<std::size_t>(1, trace.size() / 10);
  double s = 0;
  for (std::size_t i = trace.size() - tail; i < trace.size(); ++i) s += trace[i].*field;
  return s / static_cast<double>(tail);
}

inline void fill_losses(ResultRow& row, const std::vector<TraceRow>& trace) {
  row.loss_ce = tail_mean(trace, &TraceRow::loss_ce);
  row.loss_align = tail_mean(trace, &TraceRow::loss_align);
  row.loss_total = tail_mean(trace, &TraceRow::loss_total);
}

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------
// Tasks

inline void gen_data(const RunConfig& c, const RunPaths& p, std::ostream& log) {
  const auto corpora = SynthTask(synth_spec(c)).generate();
  const auto vocab = build_joint_vocab(corpora, 100000);
  write_corpora(p.data, corpora, vocab);
  log << "wrote " << corpora.train.size() << "/" << corpora.valid.size() << "/" << corpora.test.size() << " pairs, "
      << corpora.monolingual.size() << " monolingual sentences, vocabulary " << vocab.size() << " to " << p.data.string()
      << "\n";
}

template <class T>
void pretrain_plm(const RunConfig& c, const RunPaths& p, const fs::path& run_dir, std::ostream& log) {
  if (!fs::exists(p.data / "mono.txt")) throw std::runtime_error("no corpus in " + p.data.string() + " (run gen-data first)");
  const auto vocab = Vocab::load(p.data / "vocab.txt");
  std::vector<Sentence> mono;
  for (const auto& s : read_lines(p.data / "mono.txt")) mono.push_back(vocab.encode(s));
  ParamStore<T> store;
  Rng rng(c.count("seed"));
  auto model = make_plm(store, plm_dims(c, vocab.size()), rng);
  PretrainConfig pc;
  pc.steps = c.count("plm.steps");
  pc.batch_sentences = c.count("plm.batch");
  pc.mask_rate = c.num("plm.mask_rate");
  pc.schedule = schedule_spec(c, "plm.lr", "plm.warmup");
  pc.seed = c.count("seed");
  std::ostringstream trace;
  trace << "step,loss\n" << std::setprecision(9);
  pretrain_mlm(model, store, mono, pc, [&](std::size_t step, double loss) {
    trace << step << ',' << loss << '\n';
    if (step % 250 == 0) log << "  plm step " << step << " loss " << loss << "\n" << std::flush;
  });
  write_file(p.plm, encode_checkpoint(store, c.resolved()));
  write_text(run_dir / "mlm_trace.csv", trace.str());
  log << "PLM final masked-LM loss " << model.final_mlm_loss << ", saved to " << p.plm.string() << "\n";
}

template <class T>
TrainState<T> make_state(const RunConfig& c, const RunPaths& p, std::size_t vocab) {
  TrainState<T> st(model_spec(c, vocab), train_config(c));
  if (st.model.plm) load_pretrained_plm(st.model, p.plm);
  return st;
}

inline std::function<void(const TraceRow&)> progress(std::ostream& log) {
  return [&log](const TraceRow& r) {
    if (r.step % 250 == 0) log << "  step " << r.step << " ce " << r.loss_ce << " align " << r.loss_align << "\n" << std::flush;
  };
}

/// Trains one model, saves it to `ckpt` and scores the test split.
template <class T>
ResultRow train_run(const RunConfig& c, const RunPaths& p, const fs::path& run_dir, const fs::path& ckpt,
                    std::ostream& log) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto data = load_task_data(p.data, direction_from_name(c.str("direction")));
  auto st = make_state<T>(c, p, data.vocab.size());
  const auto report = train_steps(st, data.train, c.count("steps"), st.config.valid_every ? &data.valid : nullptr,
                                  DecodeConfig{1, 0.0, 10}, progress(log));
  save_checkpoint(st, ckpt, c.resolved());
  ResultRow row{run_id_for(c), c.hash(), c.str("direction")};
  row.bleu = evaluate_bleu(st.model, data.test, decode_config(c));
  fill_losses(row, report.trace);
  row.steps = st.step();
  row.seed = c.count("seed");
  std::ostringstream trace;
  write_trace_csv(trace, report.trace);
  write_text(run_dir / "trace.csv", trace.str());
  if (!report.valid.empty()) {
    std::ostringstream v;
    v << "step,bleu\n";
    for (const auto& pt : report.valid) v << pt.step << ',' << ResultRow::num(pt.bleu) << '\n';
    write_text(run_dir / "valid.csv", v.str());
  }
  row.wall_time_s = seconds_since(t0);
  return row;
}

/// Bidirectional phase then fine-tuning. Returns the phase-1 row (direction
/// "both") and the final row.
template <class T>
std::vector<ResultRow> dual_run(const RunConfig& c, const RunPaths& p, const fs::path& run_dir, std::ostream& log) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto data = load_task_data(p.data, direction_from_name(c.str("direction")));
  auto st = make_state<T>(c, p, data.vocab.size());
  const auto dc = decode_config(c);
  ResultRow bi{run_id_for(c) + "-bi", c.hash(), "both"};
  auto reports = dual_step_train<T>(st, data.train, c.count("dual.phase1_steps"), c.count("dual.phase2_steps"),
                                    std::nullopt, [&](TrainState<T>& s) {
                                      save_checkpoint(s, run_dir / "phase1.ckpt", c.resolved());
                                      bi.bleu = evaluate_bleu(s.model, data.test, dc);
                                      bi.steps = s.step();
                                      bi.wall_time_s = seconds_since(t0);
                                      log << "  bidirectional phase test BLEU " << bi.bleu << "\n";
                                    });
  fill_losses(bi, reports.first.trace);
  bi.seed = c.count("seed");
  save_checkpoint(st, p.ckpt, c.resolved());
  ResultRow fin{run_id_for(c), c.hash(), c.str("direction")};
  fin.bleu = evaluate_bleu(st.model, data.test, dc);
  fill_losses(fin, reports.second.trace);
  fin.steps = st.step();
  fin.seed = bi.seed;
  std::ostringstream trace;
  auto all = reports.first.trace;
  all.insert(all.end(), reports.second.trace.begin(), reports.second.trace.end());
  write_trace_csv(trace, all);
  write_text(run_dir / "trace.csv", trace.str());
  fin.wall_time_s = seconds_since(t0);
  return {bi, fin};
}

template <class T>
ResultRow eval_checkpoint(const RunConfig& c, const RunPaths& p, const CheckpointData& ck, std::ostream& log) {
  const auto t0 = std::chrono::steady_clock::now();
  RunConfig trained;
  trained.parse(ck.config, p.ckpt.string());
  const auto data = load_task_data(p.data, direction_from_name(trained.str("direction")));
  PinmtModel<T> model(model_spec(trained, data.vocab.size()), trained.count("seed"));
  restore_params(model.store, ck);
  const auto& split = c.str("eval.split");
  const ParallelCorpus* corpus = split == "test" ? &data.test : split == "valid" ? &data.valid : split == "train" ? &data.train : nullptr;
  if (!corpus) throw ConfigError("eval.split must be train, valid or test, got '" + split + "'");
  ResultRow row{run_id_for(c), c.hash(), trained.str("direction")};
  row.bleu = evaluate_bleu(model, *corpus, decode_config(c));
  row.steps = ck.step;
  row.seed = trained.count("seed");
  row.wall_time_s = seconds_since(t0);
  log << split << " BLEU " << row.bleu << "\n";
  return row;
}

// ---------------------------------------------------------------------------
// Ablation grids

struct GridCell {
  std::vector<std::pair<std::string, std::string>> settings;
  std::vector<double> bleu;
  std::size_t failed = 0;

  double mean() const {
    if (bleu.empty()) return std::nan("");
    double s = 0;
    for (double b : bleu) s += b;
    return s / static_cast<double>(bleu.size());
  }
};

/// Cartesian product of the grid.<key> lists, keys in sorted order. No
/// grid keys means no cells.
inline std::vector<GridCell> grid_cells(const RunConfig& c) {
  std::vector<std::pair<std::string, std::vector<std::string>>> axes;
  for (const auto& [k, v] : c.grid())
    if (k != "seeds") axes.emplace_back(k, RunConfig::split_list(v));
  std::vector<GridCell> cells;
  if (axes.empty()) return cells;
  cells.push_back({});
  for (const auto& [key, values] : axes) {
    std::vector<GridCell> next;
    for (const auto& cell : cells)
      for (const auto& v : values) {
        GridCell g = cell;
        g.settings.emplace_back(key, v);
        next.push_back(std::move(g));
      }
    cells = std::move(next);
  }
  return cells;
}

inline std::vector<std::string> grid_seeds(const RunConfig& c) {
  auto it = c.grid().find("seeds");
  return it == c.grid().end() ? std::vector<std::string>{c.str("seed")} : RunConfig::split_list(it->second);
}

/// Plain-text table sorted by mean BLEU, cells without a result last.
inline std::string grid_table(const std::vector<std::string>& keys, std::vector<GridCell> cells) {
  std::stable_sort(cells.begin(), cells.end(), [](const GridCell& a, const GridCell& b) {
    const double x = a.mean(), y = b.mean();
    if (std::isnan(x) || std::isnan(y)) return !std::isnan(x) && std::isnan(y);
    return x > y;
  });
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> head = keys;
  head.insert(head.end(), {"mean_bleu", "runs", "failed"});
  rows.push_back(head);
  for (const auto& cell : cells) {
    std::vector<std::string> r;
    for (const auto& s : cell.settings) r.push_back(s.second);
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", cell.mean());
    r.push_back(cell.bleu.empty() ? "-" : buf);
    r.push_back(std::to_string(cell.bleu.size()));
    r.push_back(std::to_string(cell.failed));
    rows.push_back(r);
  }
  std::vector<std::size_t> width(head.size(), 0);
  for (const auto& r : rows)
    for (std::size_t i = 0; i < r.size(); ++i) width[i] = std::max(width[i], r[i].size());
  std::string out;
  for (const auto& r : rows) {
    std::string line;
    for (std::size_t i = 0; i < r.size(); ++i) {
      if (i) line += "  ";
      line += r[i] + std::string(width[i] - r[i].size(), ' ');
    }
    while (!line.empty() && line.back() == ' ') line.pop_back();
    out += line + "\n";
  }
  return out;
}

inline std::string one_line(std::string s) {
  for (auto& ch : s)
    if (ch == '\n' || ch == '\r' || ch == ',') ch = ';';
  return s;
}

/// Runs every cell for every seed as a train task. A failing run is recorded
/// in the grid CSV and the grid moves on. Successful rows go to `rows`.
inline std::string ablate(const RunConfig& c, const RunPaths& p, ResultsLog& results, std::vector<ResultRow>& rows,
                          std::ostream& log) {
  auto cells = grid_cells(c);
  const auto seeds = grid_seeds(c);
  std::vector<std::string> keys;
  for (const auto& [k, v] : c.grid())
    if (k != "seeds") keys.push_back(k);
  std::string csv = "cell";
  for (const auto& k : keys) csv += "," + k;
  csv += ",seed,run_id,bleu,status\n";
  for (std::size_t i = 0; i < cells.size(); ++i) {
    auto& cell = cells[i];
    for (const auto& seed : seeds) {
      std::string line = std::to_string(i);
      for (const auto& s : cell.settings) line += "," + s.second;
      line += "," + seed;
      RunConfig cc = c;
      std::string run_id = "-", bleu = "nan", status = "ok";
      try {
        cc.set("task", "train");
        cc.set("seed", seed);
        for (const auto& [k, v] : cell.settings) cc.set(k, v);
        run_id = run_id_for(cc);
        log << "cell " << i << " seed " << seed << " (" << run_id << ")\n" << std::flush;
        const auto run_dir = p.out / "runs" / run_id;
        write_text(run_dir / "config.txt", cc.resolved());
        const auto row = use_double(cc) ? train_run<double>(cc, p, run_dir, run_dir / "model.ckpt", log)
                                        : train_run<float>(cc, p, run_dir, run_dir / "model.ckpt", log);
        results.append(row);
        rows.push_back(row);
        cell.bleu.push_back(row.bleu);
        bleu = ResultRow::num(row.bleu);
      } catch (const std::exception& e) {
        ++cell.failed;
        status = "failed: " + one_line(e.what());
        log << "  " << status << "\n";
      }
      csv += line + "," + run_id + "," + bleu + "," + status + "\n";
    }
  }
  const auto table = grid_table(keys, cells);
  const auto stem = p.out / ("ablate-" + c.hash().substr(0, 12));
  write_text(stem.string() + ".csv", csv);
  write_text(stem.string() + ".txt", table);
  return table;
}

// ---------------------------------------------------------------------------
// Dispatch

inline const std::vector<std::string>& task_names() {
  static const std::vector<std::string> t = {"gen-data", "pretrain-plm", "train", "dual-train", "eval", "ablate"};
  return t;
}

/// Runs the task named by `task`. Result rows are appended only once a run
/// has completed. Returns the rows written.
inline std::vector<ResultRow> run_task(const RunConfig& c, std::ostream& log) {
  const auto& task = c.str("task");
  if (std::find(task_names().begin(), task_names().end(), task) == task_names().end())
    throw ConfigError("unknown task '" + task + "'");
  if (task != "ablate" && !c.grid().empty()) throw ConfigError("grid keys are only valid for ablate");
  const auto p = resolve_paths(c);
  const bool dbl = use_double(c);
  const auto run_dir = p.out / "runs" / run_id_for(c);
  write_text(run_dir / "config.txt", c.resolved());
  if (task == "gen-data") {
    gen_data(c, p, log);
    return {};
  }
  if (task == "pretrain-plm") {
    dbl ? pretrain_plm<double>(c, p, run_dir, log) : pretrain_plm<float>(c, p, run_dir, log);
    return {};
  }
  ResultsLog results(p.results);
  std::vector<ResultRow> rows;
  if (task == "train") {
    rows.push_back(dbl ? train_run<double>(c, p, run_dir, p.ckpt, log) : train_run<float>(c, p, run_dir, p.ckpt, log));
  } else if (task == "dual-train") {
    rows = dbl ? dual_run<double>(c, p, run_dir, log) : dual_run<float>(c, p, run_dir, log);
  } else if (task == "eval") {
    if (!fs::exists(p.ckpt)) throw std::runtime_error("no checkpoint at " + p.ckpt.string());
    const auto ck = load_checkpoint(p.ckpt);
    rows.push_back(ck.value_bytes == 8 ? eval_checkpoint<double>(c, p, ck, log) : eval_checkpoint<float>(c, p, ck, log));
  } else {
    log << ablate(c, p, results, rows, log);
    return rows;
  }
  for (const auto& r : rows) {
    results.append(r);
    log << r.run_id << " BLEU " << ResultRow::num(r.bleu) << "\n";
  }
  return rows;
}

}  // namespace pinmt
