#pragma once

#include <algorithm>
#include <array>
#include <fstream>
#include <string>
#include <vector>

#include "bixt/random.hpp"
#include "bixt/tensor.hpp"

namespace bixt {

// Prefix-notation list expressions in the long-range-arena text form:
// fused bracket-operator tokens, a bare closing bracket and single digits,
// all space separated. Ids 0..15; classifier labels are the digit values.

constexpr int64_t kListOpsPad = 0;
constexpr int64_t kListOpsClose = 5;
constexpr int64_t kListOpsDigit0 = 6;
constexpr int64_t kListOpsVocab = 16;

inline const std::array<std::string, 16>& listops_tokens() {
  static const std::array<std::string, 16> toks = {
      "<pad>", "[MAX", "[MIN", "[MED", "[SM", "]", "0", "1",
      "2",     "3",    "4",    "5",    "6",   "7", "8", "9"};
  return toks;
}

struct ListOpsSample {
  std::vector<int64_t> ids;
  int64_t label = 0;
};

using ListOpsDataset = std::vector<ListOpsSample>;

// ---------------------------------------------------------------------------

inline std::string listops_decode(const std::vector<int64_t>& ids) {
  std::string out;
  for (int64_t id : ids) {
    if (id < 0 || id >= kListOpsVocab)
      throw ConfigError("listops id " + std::to_string(id) +
                        " outside the vocabulary");
    if (!out.empty()) out += ' ';
    out += listops_tokens()[static_cast<size_t>(id)];
  }
  return out;
}

inline std::vector<int64_t> listops_tokenize(const std::string& text) {
  std::vector<int64_t> ids;
  size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && text[i] == ' ') ++i;
    size_t j = i;
    while (j < text.size() && text[j] != ' ') ++j;
    if (j == i) break;
    const std::string tok = text.substr(i, j - i);
    const auto& vocab = listops_tokens();
    const auto it = std::find(vocab.begin(), vocab.end(), tok);
    if (it == vocab.end())
      throw ConfigError("unknown token '" + tok + "'");
    ids.push_back(it - vocab.begin());
    i = j;
  }
  return ids;
}

namespace detail {

template <class It>
int64_t listops_eval_node(It& cur, It end) {
  if (cur == end) throw ConfigError("listops expression ends early");
  const int64_t id = *cur++;
  if (id >= kListOpsDigit0 && id < kListOpsDigit0 + 10)
    return id - kListOpsDigit0;
  if (id < 1 || id > 4)
    throw ConfigError("listops expression is malformed");
  std::vector<int64_t> args;
  while (cur != end && *cur != kListOpsClose)
    args.push_back(listops_eval_node(cur, end));
  if (cur == end) throw ConfigError("listops expression is unclosed");
  ++cur;  // the bracket
  if (args.empty()) throw ConfigError("listops operator without operands");
  std::sort(args.begin(), args.end());
  switch (id) {
    case 1: return args.back();
    case 2: return args.front();
    case 3: return args[(args.size() - 1) / 2];  // lower middle when even
    default: {
      int64_t s = 0;
      for (int64_t a : args) s += a;
      return s % 10;
    }
  }
}

}  // namespace detail

inline int64_t listops_eval(const std::vector<int64_t>& ids) {
  auto cur = ids.begin();
  const int64_t v = detail::listops_eval_node(cur, ids.end());
  if (cur != ids.end())
    throw ConfigError("listops expression has trailing tokens");
  return v;
}

// ---------------------------------------------------------------------------

namespace detail {

// Appends one expression of at most `budget` tokens. The smallest operator
// form "[OP d d ]" costs four, so anything tighter becomes a digit leaf.
inline void listops_gen_node(Rng& rng, int64_t depth_left, int64_t budget,
                             std::vector<int64_t>& out) {
  if (depth_left <= 0 || budget < 4 || rng.below(10) < 3) {
    out.push_back(kListOpsDigit0 + int64_t(rng.below(10)));
    return;
  }
  const int64_t op = 1 + int64_t(rng.below(4));
  const int64_t max_arity = std::min<int64_t>(5, budget - 2);
  const int64_t arity = 2 + int64_t(rng.below(uint64_t(max_arity - 1)));
  out.push_back(op);
  int64_t spend = budget - 2;
  for (int64_t c = 0; c < arity; ++c) {
    const int64_t reserved = arity - 1 - c;  // a digit each for the rest
    const int64_t child = 1 + int64_t(rng.below(uint64_t(spend - reserved)));
    const size_t before = out.size();
    listops_gen_node(rng, depth_left - 1, child, out);
    spend -= int64_t(out.size() - before);
  }
  out.push_back(kListOpsClose);
}

}  // namespace detail

inline ListOpsDataset listops_generate(int64_t n, int64_t max_len,
                                       int64_t max_depth, uint64_t seed) {
  if (n < 1 || max_len < 1 || max_depth < 1)
    throw ConfigError("listops_generate: all limits must be at least 1");
  Rng rng(seed, "listops");
  ListOpsDataset ds;
  ds.reserve(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    ListOpsSample s;
    detail::listops_gen_node(rng, max_depth, max_len, s.ids);
    s.label = listops_eval(s.ids);
    ds.push_back(std::move(s));
  }
  return ds;
}

// ---------------------------------------------------------------------------

inline void write_lra_tsv(const ListOpsDataset& ds, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  for (const auto& s : ds)
    out << listops_decode(s.ids) << '\t' << s.label << '\n';
  out.flush();
  if (!out) throw IoError("short write to " + path);
}

inline ListOpsDataset load_lra_tsv(const std::string& path,
                                   std::string* warning = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  ListOpsDataset ds;
  std::string line;
  int64_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto where = [&] { return path + ":" + std::to_string(lineno); };
    const size_t tab = line.find('\t');
    if (tab == std::string::npos)
      throw IoError(where() + ": expected tab separated source and target");
    ListOpsSample s;
    try {
      s.ids = listops_tokenize(line.substr(0, tab));
    } catch (const ConfigError& e) {
      throw IoError(where() + ": " + e.what());
    }
    if (s.ids.empty()) throw IoError(where() + ": empty source");
    const std::string target = line.substr(tab + 1);
    size_t used = 0;
    try {
      s.label = std::stoll(target, &used);
    } catch (const std::exception&) {
      used = std::string::npos;
    }
    if (used != target.size() || s.label < 0 || s.label > 9)
      throw IoError(where() + ": bad label '" + target + "'");
    ds.push_back(std::move(s));
  }
  if (ds.empty() && warning) *warning = path + ": loaded an empty dataset";
  return ds;
}

}  // namespace bixt
