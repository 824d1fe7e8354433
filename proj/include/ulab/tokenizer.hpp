// SPDX-License-Identifier: Apache-2.0
//
// Byte-level BPE vocabulary learned from a corpus.

#pragma once

#include <nlohmann/json.hpp>

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace ulab {

/// Dense token<->id bijection. Ids 0..3 are reserved, 4..259 are raw bytes,
/// the rest are learned merges in rank order.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;
  static constexpr int kByteBase = 4;
  static constexpr int kBaseSize = kByteBase + 256;

  /// Byte-only vocabulary (no merges).
  Vocabulary();

  /// Learns merges until `vocab_size` ids exist or no pair repeats.
  static Vocabulary train(std::span<const std::string> texts, int vocab_size);

  std::vector<int> encode(std::string_view text) const;
  /// Special ids are dropped.
  std::string decode(std::span<const int> ids) const;

  int size() const { return static_cast<int>(tokens_.size()); }
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  /// Id of a token string, or kUnk.
  int id(std::string_view token) const;
  bool is_special(int id) const { return id >= 0 && id < kByteBase; }

  nlohmann::json to_json() const;
  static Vocabulary from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  bool operator==(const Vocabulary& other) const { return merges_ == other.merges_; }

 private:
  void add_merge(int left, int right);
  std::vector<int> encode_chunk(std::string_view chunk) const;

  std::vector<std::string> tokens_;
  std::vector<std::pair<int, int>> merges_;
  std::map<std::pair<int, int>, int> merge_rank_;
  std::unordered_map<std::string, int> index_;
};

/// Splits text into chunks that each start at a word boundary; a leading
/// space stays attached to the following word.
std::vector<std::string_view> pretokenize(std::string_view text);

}  // namespace ulab
