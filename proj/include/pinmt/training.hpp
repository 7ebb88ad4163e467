#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <zlib.h>

#include "pinmt/decode.hpp"
#include "pinmt/model.hpp"
#include "pinmt/optim.hpp"

namespace pinmt {

struct TrainConfig {
  std::size_t steps = 1000;
  std::size_t max_tokens = 512;
  std::size_t accumulate = 1;  // micro-batches summed per update
  ScheduleSpec schedule;
  double rho = 0.01;
  std::uint64_t seed = 1;
  std::size_t valid_every = 0;  // 0 disables periodic validation
  double divergence_loss = 1e6;

  void validate() const {
    schedule.validate();
    if (rho < 0) throw std::invalid_argument("rho must be non-negative");
    if (accumulate < 1) throw std::invalid_argument("accumulate must be at least 1");
  }
};

struct TraceRow {
  std::size_t step = 0;
  double lr_nmt = 0, lr_plm = 0, loss_ce = 0, loss_align = 0, loss_total = 0;
};

struct ValidPoint {
  std::size_t step = 0;
  double bleu = 0;
};

struct TrainReport {
  std::vector<TraceRow> trace;
  std::vector<ValidPoint> valid;
};

inline void write_trace_csv(std::ostream& os, const std::vector<TraceRow>& trace) {
  os << "step,lr_nmt,lr_plm,loss_ce,loss_align,loss_total\n";
  os.precision(9);
  for (const auto& r : trace)
    os << r.step << ',' << r.lr_nmt << ',' << r.lr_plm << ',' << r.loss_ce << ',' << r.loss_align << ','
       << r.loss_total << '\n';
}

struct TrainingDiverged : std::runtime_error {
  TrainingDiverged(const std::string& what, std::vector<TraceRow> t) : std::runtime_error(what), trace(std::move(t)) {}
  std::vector<TraceRow> trace;
};

/// Everything a resumed run needs: parameters, moments, step, data cursor
/// and dropout stream.
template <class T>
struct TrainState {
  PinmtModel<T> model;
  Adam<T> opt;
  TrainConfig config;
  Rng rng;
  std::size_t epoch = 0, cursor = 0;

  TrainState(const ModelSpec& spec, const TrainConfig& cfg)
      : model(spec, cfg.seed), config(cfg), rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL) {
    config.validate();
    if (model.plm && cfg.rho == 0) model.set_plm_trainable(false);
    opt = Adam<T>(model.store, cfg.schedule, cfg.rho);
  }

  std::size_t step() const { return opt.step_count(); }
};

// ---------------------------------------------------------------------------
// Decoding helpers

struct DecodeConfig {
  std::size_t width = 4;
  double penalty = 0.6;
  std::size_t extra_len = 10;  // max output length = source length + extra_len
};

template <class T>
Sentence translate(PinmtModel<T>& model, const Sentence& source, const DecodeConfig& dc) {
  NoGradGuard ng;
  Sentence src = source;
  src.push_back(kEos);
  auto enc = model.encode(TokenBatch::pad({src}));
  const std::size_t max_len = std::min(model.spec.nmt.max_len - 1, source.size() + dc.extra_len);
  StepFn step = [&](const std::vector<Sentence>& prefixes) { return model.next_log_probs(enc, prefixes); };
  if (dc.width == 1) return strip_special(greedy_decode(step, max_len));
  return strip_special(beam_search(step, dc.width, dc.penalty, max_len).tokens);
}

template <class T>
std::vector<Sentence> translate_corpus(PinmtModel<T>& model, const ParallelCorpus& corpus, const DecodeConfig& dc) {
  std::vector<Sentence> out;
  out.reserve(corpus.size());
  for (const auto& p : corpus.pairs) out.push_back(translate(model, p.source, dc));
  return out;
}

template <class T>
double evaluate_bleu(PinmtModel<T>& model, const ParallelCorpus& corpus, const DecodeConfig& dc) {
  std::vector<Sentence> refs;
  for (const auto& p : corpus.pairs) refs.push_back(p.target);
  return bleu(translate_corpus(model, corpus, dc), refs);
}

// ---------------------------------------------------------------------------
// Training loop

inline std::uint64_t epoch_seed(std::uint64_t seed, std::size_t epoch) {
  return seed * 0x100000001b3ULL + static_cast<std::uint64_t>(epoch) + 1;
}

inline void check_vocab(const ParallelCorpus& corpus, std::size_t vocab) {
  for (std::size_t i = 0; i < corpus.size(); ++i)
    for (const auto* side : {&corpus.pairs[i].source, &corpus.pairs[i].target})
      for (int t : *side)
        if (t < 0 || static_cast<std::size_t>(t) >= vocab)
          throw std::out_of_range("pair " + std::to_string(i) + " uses id " + std::to_string(t) +
                                  " outside the model vocabulary of " + std::to_string(vocab));
}

/// Runs `steps` updates over token-budget batches. Each epoch reshuffles
/// with a seed derived from the run seed and the epoch number.
template <class T>
TrainReport train_steps(TrainState<T>& st, const ParallelCorpus& corpus, std::size_t steps,
                        const ParallelCorpus* valid = nullptr, const DecodeConfig& valid_decode = {1, 0.0, 10},
                        const std::function<void(const TraceRow&)>& on_step = {}) {
  TrainReport report;
  if (steps == 0) return report;
  if (corpus.size() == 0) throw std::invalid_argument("train: empty corpus");
  check_vocab(corpus, st.model.vocab());
  std::vector<std::vector<std::size_t>> plan;
  std::optional<std::size_t> plan_epoch;
  auto next_batch = [&]() {
    if (plan_epoch != st.epoch) {
      plan = batch_by_tokens(corpus, st.config.max_tokens, epoch_seed(st.config.seed, st.epoch));
      plan_epoch = st.epoch;
    }
    if (st.cursor >= plan.size()) {
      ++st.epoch;
      st.cursor = 0;
      plan = batch_by_tokens(corpus, st.config.max_tokens, epoch_seed(st.config.seed, st.epoch));
      plan_epoch = st.epoch;
    }
    return make_batch(corpus, plan[st.cursor++]);
  };
  const RunMode mode{true, st.model.spec.dropout, &st.rng};
  for (std::size_t s = 0; s < steps; ++s) {
    st.model.store.zero_grad();
    TraceRow row;
    for (std::size_t k = 0; k < st.config.accumulate; ++k) {
      auto parts = st.model.loss(next_batch(), mode);
      const double total = static_cast<double>(parts.total.item());
      row.loss_ce += parts.ce;
      row.loss_align += parts.align;
      row.loss_total += total;
      if (!std::isfinite(total) || total > st.config.divergence_loss)
        throw TrainingDiverged("training diverged at step " + std::to_string(st.step() + 1) + " (loss " +
                                   std::to_string(total) + ")",
                               report.trace);
      backward(parts.total);
    }
    const double inv = 1.0 / static_cast<double>(st.config.accumulate);
    row.loss_ce *= inv;
    row.loss_align *= inv;
    row.loss_total *= inv;
    st.opt.step(st.model.store);
    row.step = st.step();
    row.lr_nmt = effective_rate(ParamGroup::nmt, row.step, st.config.schedule, st.config.rho);
    row.lr_plm = effective_rate(ParamGroup::plm, row.step, st.config.schedule, st.config.rho);
    report.trace.push_back(row);
    if (on_step) on_step(row);
    if (valid && st.config.valid_every && row.step % st.config.valid_every == 0)
      report.valid.push_back({row.step, evaluate_bleu(st.model, *valid, valid_decode)});
  }
  return report;
}

/// Phase 1 trains on the direction-swapped union, phase 2 fine-tunes on the
/// original pairs with the optimizer state carried over.
template <class T>
std::pair<TrainReport, TrainReport> dual_step_train(
    TrainState<T>& st, const ParallelCorpus& corpus, std::size_t phase1_steps, std::size_t phase2_steps,
    std::optional<std::pair<int, int>> tags = std::nullopt,
    const std::function<void(TrainState<T>&)>& at_boundary = {}) {
  if (corpus.bidirectional) throw std::invalid_argument("dual-step training expects a unidirectional corpus");
  const auto both = make_bidirectional(corpus, st.config.seed, tags);
  check_vocab(both, st.model.vocab());
  check_vocab(corpus, st.model.vocab());
  std::pair<TrainReport, TrainReport> out;
  out.first = train_steps(st, both, phase1_steps);
  if (at_boundary) at_boundary(st);
  st.epoch = 0;
  st.cursor = 0;
  out.second = train_steps(st, corpus, phase2_steps);
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct CheckpointVersionError : CheckpointError {
  using CheckpointError::CheckpointError;
};
struct CheckpointTruncatedError : CheckpointError {
  using CheckpointError::CheckpointError;
};
struct CheckpointChecksumError : CheckpointError {
  using CheckpointError::CheckpointError;
};

inline constexpr char kCheckpointMagic[8] = {'P', 'I', 'N', 'M', 'T', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointRecord {
  std::string name;
  std::uint8_t group = 0;
  Shape shape;
  std::vector<double> values, m, v;  // m, v empty when no optimizer state was saved
};

/// Decoded checkpoint. Values are widened to double, which is lossless for
/// both stored widths.
struct CheckpointData {
  std::uint8_t value_bytes = 4;
  std::string config;
  std::uint64_t step = 0, epoch = 0, cursor = 0;
  std::string rng_state;
  bool has_moments = false;
  std::vector<CheckpointRecord> records;
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoints assume a little-endian host");

class Writer {
 public:
  std::string buf;
  template <class U>
  void pod(U v) {
    buf.append(reinterpret_cast<const char*>(&v), sizeof v);
  }
  void str(const std::string& s) {
    pod<std::uint64_t>(s.size());
    buf += s;
  }
  template <class T>
  void values(std::span<const T> v) {
    buf.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(T));
  }
};

class Reader {
 public:
  explicit Reader(const std::string& b) : buf_(b) {}
  template <class U>
  U pod() {
    need(sizeof(U));
    U v;
    std::memcpy(&v, buf_.data() + pos_, sizeof v);
    pos_ += sizeof v;
    return v;
  }
  std::string str() {
    const auto n = pod<std::uint64_t>();
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::vector<double> values(std::size_t n, std::uint8_t width) {
    if (n > buf_.size()) throw CheckpointTruncatedError("checkpoint truncated");
    std::vector<double> out(n);
    for (auto& x : out) x = width == 4 ? static_cast<double>(pod<float>()) : pod<double>();
    return out;
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > buf_.size()) throw CheckpointTruncatedError("checkpoint truncated at byte " + std::to_string(pos_));
  }
  const std::string& buf_;
  std::size_t pos_ = 0;
};

inline std::uint32_t crc32_of(const char* data, std::size_t n) {
  return static_cast<std::uint32_t>(::crc32(0L, reinterpret_cast<const Bytef*>(data), static_cast<uInt>(n)));
}

}  // namespace detail

/// Serializes a store (and optionally optimizer moments and training
/// position) to bytes: magic, version, width, config text, counters, one
/// record per parameter, CRC32 trailer.
template <class T>
std::string encode_checkpoint(const ParamStore<T>& store, const std::string& config, const Adam<T>* opt = nullptr,
                              std::uint64_t epoch = 0, std::uint64_t cursor = 0, const std::string& rng_state = {}) {
  detail::Writer w;
  w.buf.append(kCheckpointMagic, sizeof kCheckpointMagic);
  w.pod<std::uint32_t>(kCheckpointVersion);
  w.pod<std::uint8_t>(sizeof(T));
  w.str(config);
  w.pod<std::uint64_t>(opt ? opt->step_count() : 0);
  w.pod<std::uint64_t>(epoch);
  w.pod<std::uint64_t>(cursor);
  w.str(rng_state);
  w.pod<std::uint8_t>(opt ? 1 : 0);
  const auto& entries = store.entries();
  w.pod<std::uint64_t>(entries.size());
  for (std::size_t k = 0; k < entries.size(); ++k) {
    const auto& e = entries[k];
    w.str(e.name);
    w.pod<std::uint8_t>(e.group == ParamGroup::plm ? 1 : 0);
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(e.tensor.rank()));
    for (auto d : e.tensor.shape()) w.pod<std::uint64_t>(d);
    w.values<T>(e.tensor.values());
    if (opt) {
      w.values<T>(std::span<const T>(opt->moments()[k].m));
      w.values<T>(std::span<const T>(opt->moments()[k].v));
    }
  }
  w.pod<std::uint32_t>(detail::crc32_of(w.buf.data(), w.buf.size()));
  return w.buf;
}

inline CheckpointData decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < sizeof kCheckpointMagic || std::memcmp(bytes.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0)
    throw CheckpointVersionError("not a checkpoint file (bad magic)");
  detail::Reader r(bytes);
  for (std::size_t i = 0; i < sizeof kCheckpointMagic; ++i) r.pod<char>();
  const auto version = r.pod<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw CheckpointVersionError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                                 std::to_string(kCheckpointVersion) + ")");
  if (bytes.size() < 16) throw CheckpointTruncatedError("checkpoint truncated");
  std::uint32_t stored;
  std::memcpy(&stored, bytes.data() + bytes.size() - 4, 4);
  CheckpointData d;
  d.value_bytes = r.pod<std::uint8_t>();
  if (d.value_bytes != 4 && d.value_bytes != 8)
    throw CheckpointError("unsupported value width " + std::to_string(d.value_bytes));
  d.config = r.str();
  d.step = r.pod<std::uint64_t>();
  d.epoch = r.pod<std::uint64_t>();
  d.cursor = r.pod<std::uint64_t>();
  d.rng_state = r.str();
  d.has_moments = r.pod<std::uint8_t>() != 0;
  const auto count = r.pod<std::uint64_t>();
  for (std::uint64_t k = 0; k < count; ++k) {
    CheckpointRecord rec;
    rec.name = r.str();
    rec.group = r.pod<std::uint8_t>();
    const auto rank = r.pod<std::uint32_t>();
    if (rank > 8) throw CheckpointError("corrupt record '" + rec.name + "'");
    for (std::uint32_t i = 0; i < rank; ++i) rec.shape.push_back(r.pod<std::uint64_t>());
    const std::size_t n = numel(rec.shape);
    rec.values = r.values(n, d.value_bytes);
    if (d.has_moments) {
      rec.m = r.values(n, d.value_bytes);
      rec.v = r.values(n, d.value_bytes);
    }
    d.records.push_back(std::move(rec));
  }
  const std::size_t body = r.pos();
  r.pod<std::uint32_t>();
  if (r.pos() != bytes.size()) throw CheckpointError("trailing bytes after checkpoint body");
  if (detail::crc32_of(bytes.data(), body) != stored) throw CheckpointChecksumError("checkpoint checksum mismatch");
  return d;
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("short write to " + path.string());
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline CheckpointData load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

template <class T>
void save_checkpoint(const TrainState<T>& st, const std::filesystem::path& path, const std::string& config) {
  write_file(path, encode_checkpoint(st.model.store, config, &st.opt, st.epoch, st.cursor, st.rng.state()));
}

/// Copies checkpoint values into matching store entries. With `prefix`,
/// only names starting with it are required and copied.
template <class T>
void restore_params(ParamStore<T>& store, const CheckpointData& d, const std::string& prefix = {},
                    Adam<T>* opt = nullptr) {
  if (d.value_bytes != sizeof(T))
    throw CheckpointError("checkpoint stores " + std::to_string(8 * d.value_bytes) + "-bit values, model uses " +
                          std::to_string(8 * sizeof(T)) + "-bit");
  std::map<std::string, const CheckpointRecord*> by_name;
  for (const auto& r : d.records) by_name[r.name] = &r;
  auto& entries = store.entries();
  for (std::size_t k = 0; k < entries.size(); ++k) {
    auto& e = entries[k];
    if (e.name.rfind(prefix, 0) != 0) continue;
    auto it = by_name.find(e.name);
    if (it == by_name.end()) throw CheckpointError("checkpoint lacks parameter '" + e.name + "'");
    const auto& rec = *it->second;
    if (rec.shape != e.tensor.shape())
      throw CheckpointError("parameter '" + e.name + "' has shape " + shape_str(rec.shape) + " in the checkpoint, " +
                            shape_str(e.tensor.shape()) + " in the model");
    auto dst = e.tensor.mutable_values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(rec.values[i]);
    if (opt && d.has_moments) {
      auto& mo = opt->moments()[k];
      for (std::size_t i = 0; i < dst.size(); ++i) {
        mo.m[i] = static_cast<T>(rec.m[i]);
        mo.v[i] = static_cast<T>(rec.v[i]);
      }
    }
  }
  if (prefix.empty() && by_name.size() != entries.size())
    throw CheckpointError("checkpoint holds " + std::to_string(by_name.size()) + " parameters, model has " +
                          std::to_string(entries.size()));
}

/// Restores a full training state saved by save_checkpoint.
template <class T>
void restore_state(TrainState<T>& st, const CheckpointData& d) {
  restore_params(st.model.store, d, {}, &st.opt);
  st.opt.set_step_count(d.step);
  st.epoch = d.epoch;
  st.cursor = d.cursor;
  if (!d.rng_state.empty()) st.rng.set_state(d.rng_state);
  st.model.clear_plm_cache();
}

}  // namespace pinmt
