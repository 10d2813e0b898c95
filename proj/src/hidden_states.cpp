#include "sentwhite/hidden_states.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "byte_io.hpp"
#include "sentwhite/errors.hpp"

namespace sentwhite {

namespace {

constexpr char kMagic[4] = {'W', 'H', 'B', '1'};

bool all_finite(std::span<const float> values) {
  return std::all_of(values.begin(), values.end(), [](float v) { return std::isfinite(v); });
}

}  // namespace

std::string to_string(RecordKind kind) {
  switch (kind) {
    case RecordKind::Tokens:
      return "TOKENS";
    case RecordKind::Pooled:
      return "POOLED";
  }
  return "UNKNOWN";
}

void HiddenStateFileHeader::validate() const {
  if (version != kFormatVersion) {
    throw DataError(fmt::format("unsupported WHB1 version {}", version));
  }
  if (num_layers < 2) {
    throw DataError(fmt::format("num_layers must be >= 2, got {}", num_layers));
  }
  if (hidden_dim < 1) throw DataError("hidden_dim must be >= 1");
  if (record_kind != RecordKind::Tokens && record_kind != RecordKind::Pooled) {
    throw DataError(
        fmt::format("invalid record_kind {}", static_cast<unsigned>(record_kind)));
  }
}

std::size_t HiddenStateRecord::expected_payload_size() const {
  const std::size_t per_layer = kind == RecordKind::Tokens
                                    ? std::size_t{token_count} * hidden_dim
                                    : std::size_t{2} * hidden_dim;
  return std::size_t{num_layers} * per_layer;
}

std::span<const float> HiddenStateRecord::token(std::uint32_t layer,
                                                std::uint32_t index) const {
  if (kind != RecordKind::Tokens) throw ConfigError("token() requires a TOKENS record");
  if (layer >= num_layers || index >= token_count) {
    throw ConfigError(fmt::format("token ({}, {}) out of range", layer, index));
  }
  const std::size_t offset =
      (std::size_t{layer} * token_count + index) * std::size_t{hidden_dim};
  return std::span<const float>(payload).subspan(offset, hidden_dim);
}

std::span<const float> HiddenStateRecord::first_token(std::uint32_t layer) const {
  if (layer >= num_layers) throw ConfigError(fmt::format("layer {} out of range", layer));
  if (kind == RecordKind::Tokens) return token(layer, 0);
  return std::span<const float>(payload).subspan(std::size_t{layer} * 2 * hidden_dim,
                                                 hidden_dim);
}

std::span<const float> HiddenStateRecord::stored_mean(std::uint32_t layer) const {
  if (kind != RecordKind::Pooled) throw ConfigError("stored_mean() requires a POOLED record");
  if (layer >= num_layers) throw ConfigError(fmt::format("layer {} out of range", layer));
  return std::span<const float>(payload).subspan((std::size_t{layer} * 2 + 1) * hidden_dim,
                                                 hidden_dim);
}

void HiddenStateRecord::validate() const {
  if (token_count < 1) {
    throw DataError(fmt::format("sentence {}: token_count must be >= 1", sentence_id));
  }
  if (payload.size() != expected_payload_size()) {
    throw DataError(fmt::format("sentence {}: payload has {} floats, expected {}", sentence_id,
                                payload.size(), expected_payload_size()));
  }
  if (!all_finite(payload)) {
    throw DataError(fmt::format("sentence {}: payload contains NaN or Inf", sentence_id));
  }
}

HiddenStateRecord make_tokens_record(
    std::uint64_t sentence_id, const std::vector<std::vector<std::vector<float>>>& tokens) {
  HiddenStateRecord rec;
  rec.sentence_id = sentence_id;
  rec.kind = RecordKind::Tokens;
  rec.num_layers = static_cast<std::uint32_t>(tokens.size());
  if (tokens.empty() || tokens.front().empty() || tokens.front().front().empty()) {
    throw DataError("make_tokens_record: empty token tensor");
  }
  rec.token_count = static_cast<std::uint32_t>(tokens.front().size());
  rec.hidden_dim = static_cast<std::uint32_t>(tokens.front().front().size());
  rec.payload.reserve(rec.expected_payload_size());
  for (const auto& layer : tokens) {
    if (layer.size() != rec.token_count) throw DataError("ragged token tensor");
    for (const auto& vec : layer) {
      if (vec.size() != rec.hidden_dim) throw DataError("ragged token tensor");
      rec.payload.insert(rec.payload.end(), vec.begin(), vec.end());
    }
  }
  return rec;
}

HiddenStateRecord to_pooled(const HiddenStateRecord& record) {
  if (record.kind == RecordKind::Pooled) return record;
  HiddenStateRecord out;
  out.sentence_id = record.sentence_id;
  out.token_count = record.token_count;
  out.kind = RecordKind::Pooled;
  out.num_layers = record.num_layers;
  out.hidden_dim = record.hidden_dim;
  out.payload.reserve(out.expected_payload_size());
  std::vector<double> acc(record.hidden_dim);
  for (std::uint32_t l = 0; l < record.num_layers; ++l) {
    auto first = record.token(l, 0);
    out.payload.insert(out.payload.end(), first.begin(), first.end());
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::uint32_t t = 0; t < record.token_count; ++t) {
      auto tok = record.token(l, t);
      for (std::uint32_t j = 0; j < record.hidden_dim; ++j) acc[j] += tok[j];
    }
    for (double v : acc) out.payload.push_back(static_cast<float>(v / record.token_count));
  }
  return out;
}

HiddenStateWriter::HiddenStateWriter(std::ostream& sink, const HiddenStateFileHeader& header)
    : sink_(sink), header_(header) {
  header_.validate();
  sink_.write(kMagic, sizeof(kMagic));
  detail::put_le(sink_, header_.version);
  detail::put_le(sink_, header_.num_layers);
  detail::put_le(sink_, header_.hidden_dim);
  detail::put_le(sink_, static_cast<std::uint8_t>(header_.record_kind));
  detail::put_le(sink_, header_.num_sentences);
  bytes_ = kHeaderBytes;
  if (!sink_) throw DataError("write failed on WHB1 header");
}

void HiddenStateWriter::write(const HiddenStateRecord& record) {
  if (record.kind != header_.record_kind || record.num_layers != header_.num_layers ||
      record.hidden_dim != header_.hidden_dim) {
    throw DataError(fmt::format(
        "sentence {}: record shape ({}, {} layers, dim {}) does not match header ({}, {}, {})",
        record.sentence_id, to_string(record.kind), record.num_layers, record.hidden_dim,
        to_string(header_.record_kind), header_.num_layers, header_.hidden_dim));
  }
  if (records_ >= header_.num_sentences) {
    throw DataError(fmt::format("more records than the declared num_sentences={}",
                                header_.num_sentences));
  }
  record.validate();
  detail::put_le(sink_, record.sentence_id);
  detail::put_le(sink_, record.token_count);
  detail::put_f32_array(sink_, record.payload);
  if (!sink_) throw DataError(fmt::format("write failed on sentence {}", record.sentence_id));
  bytes_ += 8 + 4 + record.payload.size() * sizeof(float);
  ++records_;
}

void HiddenStateWriter::finish() {
  if (records_ != header_.num_sentences) {
    throw DataError(fmt::format("wrote {} records but header declares {}", records_,
                                header_.num_sentences));
  }
  sink_.flush();
}

std::uint64_t write_hidden_states(std::span<const HiddenStateRecord> records,
                                  const HiddenStateFileHeader& header, std::ostream& sink) {
  if (records.size() != header.num_sentences) {
    throw DataError(fmt::format("{} records given but header declares {}", records.size(),
                                header.num_sentences));
  }
  HiddenStateWriter writer(sink, header);
  for (const auto& r : records) writer.write(r);
  writer.finish();
  return writer.bytes_written();
}

HiddenStateReader::HiddenStateReader(std::istream& source) : source_(source) {
  char magic[4] = {};
  source_.read(magic, sizeof(magic));
  if (source_.gcount() != sizeof(magic)) throw DataError("truncated WHB1 header");
  if (!std::equal(std::begin(magic), std::end(magic), std::begin(kMagic))) {
    throw DataError("bad magic: not a WHB1 file");
  }
  std::uint8_t kind = 0;
  if (!detail::get_le(source_, header_.version) || !detail::get_le(source_, header_.num_layers) ||
      !detail::get_le(source_, header_.hidden_dim) || !detail::get_le(source_, kind) ||
      !detail::get_le(source_, header_.num_sentences)) {
    throw DataError("truncated WHB1 header");
  }
  header_.record_kind = static_cast<RecordKind>(kind);
  header_.validate();
}

std::optional<HiddenStateRecord> HiddenStateReader::next() {
  if (read_ >= header_.num_sentences) {
    if (source_.peek() != std::istream::traits_type::eof()) {
      throw DataError(fmt::format("trailing data after the declared {} records",
                                  header_.num_sentences));
    }
    return std::nullopt;
  }
  HiddenStateRecord rec;
  rec.kind = header_.record_kind;
  rec.num_layers = header_.num_layers;
  rec.hidden_dim = header_.hidden_dim;
  if (!detail::get_le(source_, rec.sentence_id) || !detail::get_le(source_, rec.token_count)) {
    throw DataError(fmt::format("truncated file: record {} of {} missing", read_ + 1,
                                header_.num_sentences));
  }
  if (rec.token_count < 1) {
    throw DataError(fmt::format("sentence {}: token_count must be >= 1", rec.sentence_id));
  }
  rec.payload.resize(rec.expected_payload_size());
  if (!detail::get_f32_array(source_, rec.payload)) {
    throw DataError(fmt::format("truncated payload for sentence {}", rec.sentence_id));
  }
  if (!all_finite(rec.payload)) {
    throw DataError(fmt::format("sentence {}: payload contains NaN or Inf", rec.sentence_id));
  }
  ++read_;
  return rec;
}

HiddenStateFile read_hidden_state_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(fmt::format("cannot open '{}'", path));
  HiddenStateReader reader(in);
  HiddenStateFile file{reader.header(), {}};
  while (auto rec = reader.next()) file.records.push_back(std::move(*rec));
  return file;
}

void write_hidden_state_file(const std::string& path, const HiddenStateFileHeader& header,
                             std::span<const HiddenStateRecord> records) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError(fmt::format("cannot create '{}'", path));
  write_hidden_states(records, header, out);
}

void write_sentence_sidecar(const std::string& path,
                            const std::map<std::uint64_t, std::string>& sentences) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [id, text] : sentences) j[std::to_string(id)] = text;
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError(fmt::format("cannot create '{}'", path));
  out << j.dump(2) << '\n';
}

std::map<std::uint64_t, std::string> read_sentence_sidecar(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError(fmt::format("cannot open '{}'", path));
  std::map<std::uint64_t, std::string> out;
  try {
    const auto j = nlohmann::json::parse(in);
    for (const auto& [key, value] : j.items()) {
      out.emplace(std::stoull(key), value.get<std::string>());
    }
  } catch (const std::exception& e) {
    throw DataError(fmt::format("invalid sentence sidecar '{}': {}", path, e.what()));
  }
  return out;
}

}  // namespace sentwhite
