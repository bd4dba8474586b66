#include "director/data.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace director {

namespace {

const std::vector<std::string>& reserved_tokens() {
  static const std::vector<std::string> names = {"<pad>", "<bos>", "<eos>",
                                                 "<sep>", "<unk>"};
  return names;
}

}  // namespace

// ---- Vocabulary -----------------------------------------------------------------

Vocabulary Vocabulary::from_tokens(const std::vector<std::string>& content_tokens) {
  Vocabulary v;
  for (const std::string& t : reserved_tokens()) {
    v.index_[t] = static_cast<int>(v.tokens_.size());
    v.tokens_.push_back(t);
  }
  for (const std::string& t : content_tokens) {
    if (t.empty()) throw std::invalid_argument("Vocabulary: empty token string");
    if (t.find_first_of(" \t\n\r") != std::string::npos)
      throw std::invalid_argument("Vocabulary: token contains whitespace: '" + t + "'");
    if (v.index_.count(t))
      throw std::invalid_argument("Vocabulary: duplicate token '" + t + "'");
    v.index_[t] = static_cast<int>(v.tokens_.size());
    v.tokens_.push_back(t);
  }
  if (v.size() < 6)
    throw std::invalid_argument("Vocabulary: need at least one content token");
  return v;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || id >= size())
    throw std::invalid_argument("Vocabulary: id " + std::to_string(id) +
                                " out of range");
  return tokens_[static_cast<size_t>(id)];
}

int Vocabulary::id_of(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnk : it->second;
}

bool Vocabulary::contains(const std::string& token) const {
  return index_.count(token) > 0;
}

std::vector<int> Vocabulary::content_ids() const {
  std::vector<int> out;
  for (int id = static_cast<int>(reserved_tokens().size()); id < size(); ++id)
    out.push_back(id);
  return out;
}

std::vector<int> Vocabulary::ids_with_prefix(const std::string& prefix) const {
  std::vector<int> out;
  for (int id = static_cast<int>(reserved_tokens().size()); id < size(); ++id) {
    if (tokens_[static_cast<size_t>(id)].rfind(prefix, 0) == 0) out.push_back(id);
  }
  return out;
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open vocabulary file for writing: " + path);
  for (const std::string& t : tokens_) out << t << "\n";
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open vocabulary file: " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) lines.push_back(line);
  }
  const auto& res = reserved_tokens();
  if (lines.size() < res.size() ||
      !std::equal(res.begin(), res.end(), lines.begin()))
    throw std::runtime_error("vocabulary file missing reserved token block: " + path);
  return from_tokens({lines.begin() + static_cast<long>(res.size()), lines.end()});
}

std::vector<int> tokenize(const std::string& text, const Vocabulary& vocab) {
  std::vector<int> out;
  std::istringstream in(text);
  std::string word;
  while (in >> word) out.push_back(vocab.id_of(word));
  return out;
}

std::string detokenize(std::span<const int> ids, const Vocabulary& vocab) {
  std::string out;
  for (size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += vocab.token(ids[i]);
  }
  return out;
}

// ---- packing --------------------------------------------------------------------

LabeledSequence pack_sequence(std::span<const int> context_ids,
                              std::span<const int> response_ids,
                              int64_t max_seq_len) {
  if (response_ids.empty())
    throw std::invalid_argument("pack_sequence: empty response");
  const int64_t resp = static_cast<int64_t>(response_ids.size());
  if (resp + 2 > max_seq_len)
    throw std::invalid_argument("pack_sequence: response of " + std::to_string(resp) +
                                " tokens cannot fit in max_seq_len " +
                                std::to_string(max_seq_len) +
                                "; responses are never truncated");

  // context budget leaves room for BOS, SEP and EOS; truncate from the left
  int64_t keep = static_cast<int64_t>(context_ids.size());
  if (keep > 0) {
    const int64_t budget = max_seq_len - resp - 3;
    keep = std::min(keep, std::max<int64_t>(budget, 0));
  }
  const bool has_context = keep > 0;

  LabeledSequence seq;
  seq.tokens.push_back(Vocabulary::kBos);
  if (has_context) {
    seq.tokens.insert(seq.tokens.end(), context_ids.end() - keep, context_ids.end());
    seq.tokens.push_back(Vocabulary::kSep);
  }
  const size_t response_start = seq.tokens.size();
  seq.tokens.insert(seq.tokens.end(), response_ids.begin(), response_ids.end());
  seq.tokens.push_back(Vocabulary::kEos);

  seq.labels.assign(seq.tokens.size(), TokenLabel::unlabeled);
  seq.weights.assign(seq.tokens.size(), 1.0);
  seq.lm_mask.assign(seq.tokens.size(), 0);
  for (size_t i = response_start; i < seq.tokens.size(); ++i) seq.lm_mask[i] = 1;
  return seq;
}

std::vector<int> pack_prompt(std::span<const int> context_ids, int64_t max_seq_len) {
  std::vector<int> out = {Vocabulary::kBos};
  if (!context_ids.empty()) {
    int64_t keep = static_cast<int64_t>(context_ids.size());
    keep = std::min(keep, std::max<int64_t>(max_seq_len - 2, 0));
    out.insert(out.end(), context_ids.end() - keep, context_ids.end());
    out.push_back(Vocabulary::kSep);
  }
  return out;
}

LabeledSequence pack_record(const CorpusRecord& record, const Vocabulary& vocab,
                            int64_t max_seq_len) {
  return pack_sequence(tokenize(record.context, vocab),
                       tokenize(record.response, vocab), max_seq_len);
}

LabeledSequence propagate_labels(const CorpusRecord& record, const Vocabulary& vocab,
                                 int64_t max_seq_len) {
  if (!record.seq_label.has_value())
    throw std::invalid_argument("propagate_labels: record carries no sequence label");
  const std::vector<int> resp = tokenize(record.response, vocab);
  if (resp.empty()) throw std::invalid_argument("propagate_labels: empty response");

  LabeledSequence seq = pack_sequence(tokenize(record.context, vocab), resp, max_seq_len);
  const TokenLabel label = *record.seq_label == SeqLabel::positive
                               ? TokenLabel::positive
                               : TokenLabel::negative;
  // response tokens only; EOS and context stay unlabeled
  const size_t response_start = seq.tokens.size() - resp.size() - 1;
  for (size_t i = 0; i < resp.size(); ++i) seq.labels[response_start + i] = label;
  return seq;
}

// ---- repetition labeling ----------------------------------------------------------

LabeledSequence label_repetitions(std::span<const int> context_ids,
                                  std::span<const int> generation_ids, int max_n,
                                  bool weighted, int64_t max_seq_len) {
  if (generation_ids.empty())
    throw std::invalid_argument("label_repetitions: empty generation");
  if (max_n < 1 || max_n > 5)
    throw std::invalid_argument("label_repetitions: max_n must be in 1..5, got " +
                                std::to_string(max_n));

  std::vector<int> stream(context_ids.begin(), context_ids.end());
  stream.insert(stream.end(), generation_ids.begin(), generation_ids.end());
  const int64_t ctx_len = static_cast<int64_t>(context_ids.size());
  const int64_t total = static_cast<int64_t>(stream.size());

  // covering[g] = largest n of any repeating n-gram that covers generation
  // position g (0 when not covered)
  std::vector<int> covering(generation_ids.size(), 0);
  const int n_lo = weighted ? 1 : max_n;
  for (int n = n_lo; n <= max_n; ++n) {
    for (int64_t i = 0; i + n <= total; ++i) {
      if (i + n <= ctx_len) continue;  // occurrence entirely inside the context
      bool repeats = false;
      for (int64_t j = 0; j < i && !repeats; ++j) {
        if (j + n > total) break;
        repeats = std::equal(stream.begin() + i, stream.begin() + i + n,
                             stream.begin() + j);
      }
      if (!repeats) continue;
      for (int64_t p = std::max(i, ctx_len); p < i + n; ++p) {
        int& c = covering[static_cast<size_t>(p - ctx_len)];
        c = std::max(c, n);
      }
    }
  }

  LabeledSequence seq = pack_sequence(context_ids, generation_ids, max_seq_len);
  const size_t response_start = seq.tokens.size() - generation_ids.size() - 1;
  for (size_t g = 0; g < generation_ids.size(); ++g) {
    if (covering[g] > 0) {
      seq.labels[response_start + g] = TokenLabel::negative;
      if (weighted)
        seq.weights[response_start + g] =
            static_cast<double>(covering[g]) / static_cast<double>(max_n);
    } else {
      seq.labels[response_start + g] = TokenLabel::positive;
    }
  }
  return seq;
}

// ---- corpus files ----------------------------------------------------------------

std::vector<CorpusRecord> read_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open corpus file: " + path);
  std::vector<CorpusRecord> out;
  std::string line;
  int64_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    size_t pos = 0;
    while (true) {
      const size_t tab = line.find('\t', pos);
      if (tab == std::string::npos) {
        fields.push_back(line.substr(pos));
        break;
      }
      fields.push_back(line.substr(pos, tab - pos));
      pos = tab + 1;
    }
    if (fields.size() < 2 || fields.size() > 3)
      throw std::runtime_error(path + ":" + std::to_string(line_no) +
                               ": expected 2 or 3 tab-separated fields, got " +
                               std::to_string(fields.size()));
    CorpusRecord rec;
    rec.context = fields[0];
    rec.response = fields[1];
    if (fields.size() == 3 && !fields[2].empty()) {
      if (fields[2] == "pos") {
        rec.seq_label = SeqLabel::positive;
      } else if (fields[2] == "neg") {
        rec.seq_label = SeqLabel::negative;
      } else {
        throw std::runtime_error(path + ":" + std::to_string(line_no) +
                                 ": label must be 'pos' or 'neg', got '" +
                                 fields[2] + "'");
      }
    }
    out.push_back(std::move(rec));
  }
  return out;
}

void write_corpus(const std::string& path, const std::vector<CorpusRecord>& records) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open corpus file for writing: " + path);
  for (const CorpusRecord& r : records) {
    out << r.context << '\t' << r.response;
    if (r.seq_label.has_value())
      out << '\t' << (*r.seq_label == SeqLabel::positive ? "pos" : "neg");
    out << '\n';
  }
}

// ---- synthetic tasks ---------------------------------------------------------------

namespace {

std::string join_tokens(const std::vector<int>& ids, const Vocabulary& vocab) {
  return detokenize(ids, vocab);
}

struct SafetyChain {
  const Vocabulary& vocab;
  std::vector<int> normal, triggers, bad;

  bool is_trigger(int id) const {
    return std::find(triggers.begin(), triggers.end(), id) != triggers.end();
  }
  bool is_bad(int id) const {
    return std::find(bad.begin(), bad.end(), id) != bad.end();
  }

  int next(int last, Rng& rng) const {
    if (is_trigger(last)) {
      if (rng.uniform() < 0.5) return bad[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(bad.size())))];
      return normal[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(normal.size())))];
    }
    if (is_bad(last)) {
      return normal[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(normal.size())))];
    }
    if (rng.uniform() < 0.18)
      return triggers[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(triggers.size())))];
    return normal[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(normal.size())))];
  }

  std::vector<int> continuation(int last, int len, Rng& rng) const {
    std::vector<int> out;
    out.reserve(static_cast<size_t>(len));
    for (int i = 0; i < len; ++i) {
      last = next(last, rng);
      out.push_back(last);
    }
    return out;
  }
};

}  // namespace

SyntheticTask make_synthetic_safety_task(uint64_t seed, const SynthSizes& sizes) {
  if (sizes.n_lm < 1 || sizes.n_valid < 1 || sizes.n_eval < 1 ||
      sizes.response_len < 1 || sizes.context_len < 1)
    throw std::invalid_argument("make_synthetic_safety_task: sizes must be positive");
  if (sizes.n_class < 2)
    throw std::invalid_argument(
        "make_synthetic_safety_task: n_class too small to cover both classes");

  std::vector<std::string> content;
  for (int i = 0; i < 16; ++i) content.push_back("w" + std::to_string(i));
  for (int i = 0; i < 4; ++i) content.push_back("trig" + std::to_string(i));
  for (int i = 0; i < 4; ++i) content.push_back("bad" + std::to_string(i));

  SyntheticTask task;
  task.vocab = Vocabulary::from_tokens(content);
  SafetyChain chain{task.vocab, {}, {}, {}};
  for (const std::string& w : content) {
    const int id = task.vocab.id_of(w);
    if (w.rfind("trig", 0) == 0) {
      chain.triggers.push_back(id);
    } else if (w.rfind("bad", 0) == 0) {
      chain.bad.push_back(id);
    } else {
      chain.normal.push_back(id);
    }
  }
  task.bad_ids = chain.bad;
  task.trigger_ids = chain.triggers;

  Rng rng(substream_seed(seed, "data-safety"));

  auto random_context = [&](bool end_at_trigger) {
    std::vector<int> ctx;
    for (int i = 0; i < sizes.context_len; ++i)
      ctx.push_back(chain.normal[static_cast<size_t>(
          rng.uniform_int(static_cast<int64_t>(chain.normal.size())))]);
    if (end_at_trigger)
      ctx.back() = chain.triggers[static_cast<size_t>(
          rng.uniform_int(static_cast<int64_t>(chain.triggers.size())))];
    return ctx;
  };

  auto make_record = [&](bool end_at_trigger) {
    const std::vector<int> ctx = random_context(end_at_trigger);
    const std::vector<int> resp = chain.continuation(ctx.back(), sizes.response_len, rng);
    CorpusRecord rec;
    rec.context = join_tokens(ctx, task.vocab);
    rec.response = join_tokens(resp, task.vocab);
    const bool has_bad = std::any_of(resp.begin(), resp.end(),
                                     [&](int id) { return chain.is_bad(id); });
    rec.seq_label = has_bad ? SeqLabel::negative : SeqLabel::positive;
    return rec;
  };

  // a slice of LM contexts ends at a trigger so the trigger-then-SEP boundary
  // pattern of the eval prompts is represented in training
  for (int i = 0; i < sizes.n_lm; ++i) {
    CorpusRecord rec = make_record(rng.uniform() < 0.3);
    rec.seq_label.reset();
    task.d_lm.push_back(std::move(rec));
  }

  // fill both class quotas; organic generation covers both classes easily at
  // these chain parameters
  auto fill_labeled = [&](std::vector<CorpusRecord>& dst, int count) {
    const int want_pos = count / 2;
    const int want_neg = count - want_pos;
    int got_pos = 0, got_neg = 0;
    int64_t attempts = 0;
    const int64_t cap = static_cast<int64_t>(count) * 200 + 1000;
    std::vector<CorpusRecord> pos, neg;
    while (got_pos < want_pos || got_neg < want_neg) {
      if (++attempts > cap)
        throw std::runtime_error(
            "make_synthetic_safety_task: could not cover both classes within "
            "the attempt budget");
      CorpusRecord rec = make_record(rng.uniform() < 0.5);
      if (*rec.seq_label == SeqLabel::positive && got_pos < want_pos) {
        pos.push_back(std::move(rec));
        ++got_pos;
      } else if (*rec.seq_label == SeqLabel::negative && got_neg < want_neg) {
        neg.push_back(std::move(rec));
        ++got_neg;
      }
    }
    // deterministic interleave
    for (int i = 0; i < count; ++i) {
      if (i % 2 == 0 && !pos.empty()) {
        dst.push_back(std::move(pos.back()));
        pos.pop_back();
      } else if (!neg.empty()) {
        dst.push_back(std::move(neg.back()));
        neg.pop_back();
      } else {
        dst.push_back(std::move(pos.back()));
        pos.pop_back();
      }
    }
  };

  fill_labeled(task.d_class, sizes.n_class);
  fill_labeled(task.valid, sizes.n_valid);

  for (int i = 0; i < sizes.n_eval; ++i) task.eval_prompts.push_back(make_record(true));
  for (CorpusRecord& r : task.eval_prompts) r.seq_label.reset();
  return task;
}

SyntheticTask make_synthetic_repetition_task(uint64_t seed, const SynthSizes& sizes) {
  if (sizes.n_lm < 1 || sizes.n_valid < 1 || sizes.n_eval < 1 ||
      sizes.response_len < 1 || sizes.context_len < 1)
    throw std::invalid_argument("make_synthetic_repetition_task: sizes must be positive");

  std::vector<std::string> content;
  for (int i = 0; i < 16; ++i) content.push_back("r" + std::to_string(i));

  SyntheticTask task;
  task.vocab = Vocabulary::from_tokens(content);
  std::vector<int> all_ids = task.vocab.content_ids();
  const std::vector<int> cycle = {all_ids[0], all_ids[1], all_ids[2]};

  Rng rng(substream_seed(seed, "data-repetition"));

  auto next = [&](int last) {
    auto it = std::find(cycle.begin(), cycle.end(), last);
    if (it != cycle.end()) {
      if (rng.uniform() < 0.5) return cycle[static_cast<size_t>((it - cycle.begin() + 1) % 3)];
    } else if (rng.uniform() < 0.3) {
      return cycle[0];
    }
    return all_ids[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(all_ids.size())))];
  };

  auto make_record = [&] {
    std::vector<int> ctx;
    for (int i = 0; i < sizes.context_len; ++i)
      ctx.push_back(all_ids[static_cast<size_t>(
          rng.uniform_int(static_cast<int64_t>(all_ids.size())))]);
    std::vector<int> resp;
    int last = ctx.back();
    for (int i = 0; i < sizes.response_len; ++i) {
      last = next(last);
      resp.push_back(last);
    }
    CorpusRecord rec;
    rec.context = join_tokens(ctx, task.vocab);
    rec.response = join_tokens(resp, task.vocab);
    return rec;
  };

  for (int i = 0; i < sizes.n_lm; ++i) task.d_lm.push_back(make_record());
  for (int i = 0; i < sizes.n_valid; ++i) task.valid.push_back(make_record());
  for (int i = 0; i < sizes.n_eval; ++i) task.eval_prompts.push_back(make_record());
  return task;
}

// ---- batching -------------------------------------------------------------------

std::vector<Batch> batcher(std::span<const LabeledSequence> sequences,
                           int64_t batch_size, int pad_id) {
  if (batch_size < 1) throw std::invalid_argument("batcher: batch_size must be >= 1");
  std::vector<Batch> out;
  for (size_t start = 0; start < sequences.size();
       start += static_cast<size_t>(batch_size)) {
    const size_t stop = std::min(sequences.size(), start + static_cast<size_t>(batch_size));
    Batch batch;
    size_t max_len = 0;
    for (size_t i = start; i < stop; ++i) max_len = std::max(max_len, sequences[i].length());
    for (size_t i = start; i < stop; ++i) {
      LabeledSequence item = sequences[i];
      batch.lengths.push_back(static_cast<int64_t>(item.length()));
      while (item.length() < max_len) {
        item.tokens.push_back(pad_id);
        item.labels.push_back(TokenLabel::unlabeled);
        item.weights.push_back(1.0);
        item.lm_mask.push_back(0);
      }
      batch.items.push_back(std::move(item));
    }
    out.push_back(std::move(batch));
  }
  return out;
}

}  // namespace director
