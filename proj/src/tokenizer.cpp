// SPDX-License-Identifier: Apache-2.0

#include "ulab/tokenizer.hpp"

#include <fstream>
#include <limits>
#include <stdexcept>

namespace ulab {

namespace {

bool is_space(char c) { return c == ' ' || c == '\n' || c == '\t' || c == '\r'; }

}  // namespace

std::vector<std::string_view> pretokenize(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (std::size_t i = 1; i < text.size(); ++i) {
    if (is_space(text[i]) && !is_space(text[i - 1])) {
      out.push_back(text.substr(start, i - start));
      start = i;
    }
  }
  if (start < text.size()) out.push_back(text.substr(start));
  return out;
}

Vocabulary::Vocabulary() {
  tokens_ = {"<pad>", "<bos>", "<eos>", "<unk>"};
  for (int b = 0; b < 256; ++b) tokens_.emplace_back(1, static_cast<char>(b));
  for (int i = 0; i < static_cast<int>(tokens_.size()); ++i) {
    // Special names must not shadow the single-byte tokens.
    if (i < kByteBase) continue;
    index_.emplace(tokens_[static_cast<std::size_t>(i)], i);
  }
  for (int i = 0; i < kByteBase; ++i) index_.emplace(tokens_[static_cast<std::size_t>(i)], i);
}

void Vocabulary::add_merge(int left, int right) {
  const int id = size();
  merges_.emplace_back(left, right);
  merge_rank_.emplace(std::make_pair(left, right), static_cast<int>(merges_.size() - 1));
  tokens_.push_back(token(left) + token(right));
  index_.emplace(tokens_.back(), id);
}

Vocabulary Vocabulary::train(std::span<const std::string> texts, int vocab_size) {
  Vocabulary vocab;
  if (vocab_size < kBaseSize)
    throw std::invalid_argument("Vocabulary::train: vocab_size must be at least " + std::to_string(kBaseSize));

  std::map<std::string, long> chunk_counts;
  for (const std::string& t : texts)
    for (std::string_view c : pretokenize(t)) ++chunk_counts[std::string(c)];

  struct Word {
    std::vector<int> symbols;
    long count;
  };
  std::vector<Word> words;
  words.reserve(chunk_counts.size());
  for (const auto& [chunk, count] : chunk_counts) {
    Word w{{}, count};
    for (unsigned char ch : chunk) w.symbols.push_back(kByteBase + ch);
    words.push_back(std::move(w));
  }

  while (vocab.size() < vocab_size) {
    std::map<std::pair<int, int>, long> pairs;
    for (const Word& w : words)
      for (std::size_t i = 0; i + 1 < w.symbols.size(); ++i) pairs[{w.symbols[i], w.symbols[i + 1]}] += w.count;

    // Most frequent pair; ties go to the smallest pair (map order). Pairs
    // whose concatenation already names a token are skipped so ids stay a
    // bijection with strings.
    std::pair<int, int> best{-1, -1};
    long best_count = 1;
    for (const auto& [p, c] : pairs) {
      if (c <= best_count) continue;
      if (vocab.index_.contains(vocab.token(p.first) + vocab.token(p.second))) continue;
      best = p;
      best_count = c;
    }
    if (best.first < 0) break;

    vocab.add_merge(best.first, best.second);
    const int merged = vocab.size() - 1;
    for (Word& w : words) {
      std::vector<int> next;
      next.reserve(w.symbols.size());
      for (std::size_t i = 0; i < w.symbols.size(); ++i) {
        if (i + 1 < w.symbols.size() && w.symbols[i] == best.first && w.symbols[i + 1] == best.second) {
          next.push_back(merged);
          ++i;
        } else {
          next.push_back(w.symbols[i]);
        }
      }
      w.symbols = std::move(next);
    }
  }
  return vocab;
}

std::vector<int> Vocabulary::encode_chunk(std::string_view chunk) const {
  std::vector<int> symbols;
  symbols.reserve(chunk.size());
  for (unsigned char ch : chunk) symbols.push_back(kByteBase + ch);
  while (symbols.size() > 1) {
    int best_rank = std::numeric_limits<int>::max();
    for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
      auto it = merge_rank_.find({symbols[i], symbols[i + 1]});
      if (it != merge_rank_.end() && it->second < best_rank) best_rank = it->second;
    }
    if (best_rank == std::numeric_limits<int>::max()) break;
    const auto [l, r] = merges_[static_cast<std::size_t>(best_rank)];
    const int merged = kBaseSize + best_rank;
    std::vector<int> next;
    next.reserve(symbols.size());
    for (std::size_t i = 0; i < symbols.size(); ++i) {
      if (i + 1 < symbols.size() && symbols[i] == l && symbols[i + 1] == r) {
        next.push_back(merged);
        ++i;
      } else {
        next.push_back(symbols[i]);
      }
    }
    symbols = std::move(next);
  }
  return symbols;
}

std::vector<int> Vocabulary::encode(std::string_view text) const {
  std::vector<int> out;
  for (std::string_view chunk : pretokenize(text)) {
    std::vector<int> ids = encode_chunk(chunk);
    out.insert(out.end(), ids.begin(), ids.end());
  }
  return out;
}

std::string Vocabulary::decode(std::span<const int> ids) const {
  std::string out;
  for (int id : ids) {
    if (id < 0 || id >= size()) throw std::out_of_range("Vocabulary::decode: id " + std::to_string(id));
    if (is_special(id)) continue;
    out += token(id);
  }
  return out;
}

int Vocabulary::id(std::string_view tok) const {
  auto it = index_.find(std::string(tok));
  return it == index_.end() ? kUnk : it->second;
}

nlohmann::json Vocabulary::to_json() const {
  nlohmann::json merges = nlohmann::json::array();
  for (const auto& [l, r] : merges_) merges.push_back({l, r});
  return {{"format", "ulab-bpe"}, {"version", 1}, {"size", size()}, {"merges", merges}};
}

Vocabulary Vocabulary::from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "ulab-bpe") throw std::runtime_error("vocabulary: unknown format");
  Vocabulary v;
  for (const auto& m : j.at("merges")) {
    const int l = m.at(0).get<int>(), r = m.at(1).get<int>();
    if (l < kByteBase || r < kByteBase || l >= v.size() || r >= v.size())
      throw std::runtime_error("vocabulary: merge refers to unknown id");
    v.add_merge(l, r);
  }
  if (j.contains("size") && j.at("size").get<int>() != v.size())
    throw std::runtime_error("vocabulary: size field disagrees with merges");
  return v;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << to_json().dump() << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  return from_json(nlohmann::json::parse(in));
}

}  // namespace ulab
