#pragma once

// WHB1: binary interchange format for per-layer transformer hidden states.
//
// Layout (all integers and floats little-endian):
//
//   header   magic "WHB1" | u32 version | u32 num_layers | u32 hidden_dim
//            | u8 record_kind | u64 num_sentences
//   record   u64 sentence_id | u32 token_count | f32 payload[...]
//
// TOKENS payload is num_layers x token_count x hidden_dim (layer-major, then
// token, then dim; token 0 is the sequence's first token). POOLED payload is
// num_layers x 2 x hidden_dim: per layer the first-token vector followed by
// the mean over all tokens.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace sentwhite {

enum class RecordKind : std::uint8_t { Tokens = 0, Pooled = 1 };

std::string to_string(RecordKind kind);

inline constexpr std::uint32_t kFormatVersion = 1;

struct HiddenStateFileHeader {
  std::uint32_t version = kFormatVersion;
  std::uint32_t num_layers = 0;  // L + 1, layer 0 being the non-contextual embeddings
  std::uint32_t hidden_dim = 0;
  RecordKind record_kind = RecordKind::Tokens;
  std::uint64_t num_sentences = 0;

  bool operator==(const HiddenStateFileHeader&) const = default;

  // Throws DataError when the invariants do not hold.
  void validate() const;
};

inline constexpr std::size_t kHeaderBytes = 4 + 4 + 4 + 4 + 1 + 8;

// One sentence's hidden states. The layout fields duplicate the file header
// so that a record can be pooled on its own.
struct HiddenStateRecord {
  std::uint64_t sentence_id = 0;
  std::uint32_t token_count = 0;
  RecordKind kind = RecordKind::Tokens;
  std::uint32_t num_layers = 0;
  std::uint32_t hidden_dim = 0;
  std::vector<float> payload;

  bool operator==(const HiddenStateRecord&) const = default;

  // Number of floats the payload must hold for this kind and shape.
  std::size_t expected_payload_size() const;

  // TOKENS only.
  std::span<const float> token(std::uint32_t layer, std::uint32_t index) const;
  // Available for both kinds: the first-token vector at `layer`.
  std::span<const float> first_token(std::uint32_t layer) const;
  // POOLED only: the stored mean-over-tokens vector at `layer`.
  std::span<const float> stored_mean(std::uint32_t layer) const;

  // Throws DataError naming the sentence on shape mismatch or non-finite data.
  void validate() const;
};

// Builds a TOKENS record from per-layer token vectors
// (tokens[layer][token][dim]).
HiddenStateRecord make_tokens_record(
    std::uint64_t sentence_id, const std::vector<std::vector<std::vector<float>>>& tokens);

// Reduces a TOKENS record to the POOLED statistics. The mean is accumulated in
// double and rounded once to float.
HiddenStateRecord to_pooled(const HiddenStateRecord& record);

class HiddenStateWriter {
 public:
  // Writes the header immediately.
  HiddenStateWriter(std::ostream& sink, const HiddenStateFileHeader& header);

  void write(const HiddenStateRecord& record);

  // Verifies that the declared number of records was written.
  void finish();

  std::uint64_t bytes_written() const { return bytes_; }
  std::uint64_t records_written() const { return records_; }

 private:
  std::ostream& sink_;
  HiddenStateFileHeader header_;
  std::uint64_t bytes_ = 0;
  std::uint64_t records_ = 0;
};

// Writes header then records; returns the byte count.
std::uint64_t write_hidden_states(std::span<const HiddenStateRecord> records,
                                  const HiddenStateFileHeader& header, std::ostream& sink);

// Streaming reader. Holds at most one record in memory at a time.
class HiddenStateReader {
 public:
  // Reads and validates the header. Throws DataError on bad magic,
  // unsupported version or a truncated header.
  explicit HiddenStateReader(std::istream& source);

  const HiddenStateFileHeader& header() const { return header_; }

  // Next record, or nullopt after the last declared record. Throws DataError
  // on truncation or non-finite payload values.
  std::optional<HiddenStateRecord> next();

  std::uint64_t records_read() const { return read_; }

 private:
  std::istream& source_;
  HiddenStateFileHeader header_;
  std::uint64_t read_ = 0;
};

// Convenience: read a whole file into memory.
struct HiddenStateFile {
  HiddenStateFileHeader header;
  std::vector<HiddenStateRecord> records;
};
HiddenStateFile read_hidden_state_file(const std::string& path);
void write_hidden_state_file(const std::string& path, const HiddenStateFileHeader& header,
                             std::span<const HiddenStateRecord> records);

// Optional JSON sidecar mapping sentence_id -> sentence text. Informational
// only; the numeric code never reads it.
void write_sentence_sidecar(const std::string& path,
                            const std::map<std::uint64_t, std::string>& sentences);
std::map<std::uint64_t, std::string> read_sentence_sidecar(const std::string& path);

}  // namespace sentwhite
