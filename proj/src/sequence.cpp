#include "mmi/sequence.hpp"

#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "mmi/errors.hpp"

namespace mmi {

std::int64_t PackedSequence::boi_position(std::int64_t j) const {
  for (std::int64_t p = 0; p < size(); ++p) {
    if (stream[p].kind == SlotKind::BoI && stream[p].value == j) return p;
  }
  throw LookupError("no BoI for image " + std::to_string(j));
}

std::int64_t PackedSequence::segment_start(std::int64_t pos) const { return pos - position[pos]; }

std::vector<std::int64_t> PackedSequence::token_ids(const Vocab& vocab) const {
  std::vector<std::int64_t> ids;
  ids.reserve(stream.size());
  for (const auto& s : stream) {
    switch (s.kind) {
      case SlotKind::BoS: ids.push_back(vocab.bos()); break;
      case SlotKind::EoS: ids.push_back(vocab.eos()); break;
      case SlotKind::BoI: ids.push_back(vocab.boi()); break;
      case SlotKind::Text: ids.push_back(s.value); break;
      case SlotKind::Image: ids.push_back(-1); break;
    }
  }
  return ids;
}

PackedSequence build(const std::vector<Element>& elements, std::int64_t tokens_per_image, const Vocab& vocab,
                     bool close) {
  if (elements.empty()) throw EmptyInputError("build: empty element list");
  if (tokens_per_image < 1) throw ConfigError("build: tokens_per_image must be at least 1");
  PackedSequence seq;
  seq.tokens_per_image = tokens_per_image;
  seq.stream.push_back({SlotKind::BoS, 0, 0});
  for (const auto& e : elements) {
    if (e.kind == Element::Kind::Text) {
      for (auto id : e.tokens) {
        if (id < 0 || id >= vocab.text) {
          throw DimensionError("build: token id " + std::to_string(id) + " outside the text vocabulary of " +
                               std::to_string(vocab.text));
        }
        seq.stream.push_back({SlotKind::Text, id, 0});
      }
    } else {
      const auto local = static_cast<std::int64_t>(seq.images.size());
      seq.images.push_back(e.image);
      seq.stream.push_back({SlotKind::BoI, local, 0});
      for (std::int64_t i = 0; i < tokens_per_image; ++i) seq.stream.push_back({SlotKind::Image, local, i});
    }
  }
  if (close) seq.stream.push_back({SlotKind::EoS, 0, 0});
  seq.segment.assign(seq.stream.size(), 0);
  seq.position.resize(seq.stream.size());
  for (std::size_t i = 0; i < seq.stream.size(); ++i) seq.position[i] = static_cast<std::int64_t>(i);
  return seq;
}

std::vector<Element> parse_back(const PackedSequence& seq) {
  std::vector<Element> out;
  for (const auto& s : seq.stream) {
    if (s.kind == SlotKind::Text) {
      if (out.empty() || out.back().kind != Element::Kind::Text) out.push_back(Element::text({}));
      out.back().tokens.push_back(s.value);
    } else if (s.kind == SlotKind::BoI) {
      out.push_back(Element::img(seq.images[static_cast<std::size_t>(s.value)]));
    }
  }
  return out;
}

std::vector<std::vector<std::int64_t>> visibility(const PackedSequence& seq, bool strict) {
  std::vector<std::vector<std::int64_t>> out(seq.stream.size());
  std::vector<std::int64_t> visible;
  std::vector<std::int64_t> pending;  // images whose BoI was seen but that are not visible yet
  for (std::int64_t p = 0; p < seq.size(); ++p) {
    if (seq.position[p] == 0) {
      visible.clear();
      pending.clear();
    }
    // Promote images that become visible at p.
    for (auto it = pending.begin(); it != pending.end();) {
      const auto& prev = seq.stream[p - 1];
      const bool ready = !strict || (prev.kind == SlotKind::Image && prev.value == *it &&
                                     prev.index == seq.tokens_per_image - 1);
      if (ready) {
        visible.push_back(*it);
        it = pending.erase(it);
      } else {
        ++it;
      }
    }
    out[p] = visible;
    if (seq.stream[p].kind == SlotKind::BoI) pending.push_back(seq.stream[p].value);
  }
  return out;
}

NtpTargets ntp_targets(const PackedSequence& seq, const Vocab& vocab) {
  const auto ids = seq.token_ids(vocab);
  NtpTargets out{std::vector<std::int64_t>(seq.stream.size(), 0), std::vector<std::uint8_t>(seq.stream.size(), 0)};
  for (std::int64_t p = 0; p + 1 < seq.size(); ++p) {
    if (seq.segment[p + 1] != seq.segment[p]) continue;
    const auto next = seq.stream[p + 1].kind;
    if (next == SlotKind::Image || next == SlotKind::BoS) continue;
    out.targets[p] = ids[p + 1];
    out.mask[p] = 1;
  }
  return out;
}

std::vector<PackedSequence> pack(const std::vector<PackedSequence>& samples, std::int64_t max_len) {
  std::vector<PackedSequence> contexts;
  std::vector<std::int64_t> segments;
  for (const auto& s : samples) {
    if (s.size() > max_len) {
      throw LengthError("pack: sample of length " + std::to_string(s.size()) + " exceeds the context of " +
                        std::to_string(max_len));
    }
    std::size_t slot = 0;
    while (slot < contexts.size() && contexts[slot].size() + s.size() > max_len) ++slot;
    if (slot == contexts.size()) {
      contexts.emplace_back();
      contexts.back().tokens_per_image = s.tokens_per_image;
      segments.push_back(0);
    }
    auto& ctx = contexts[slot];
    if (ctx.tokens_per_image != s.tokens_per_image) throw ConfigError("pack: samples disagree on tokens per image");
    const auto offset = static_cast<std::int64_t>(ctx.images.size());
    for (auto slot_copy : s.stream) {
      if (slot_copy.kind == SlotKind::BoI || slot_copy.kind == SlotKind::Image) slot_copy.value += offset;
      ctx.stream.push_back(slot_copy);
    }
    ctx.images.insert(ctx.images.end(), s.images.begin(), s.images.end());
    for (std::int64_t i = 0; i < s.size(); ++i) {
      ctx.segment.push_back(segments[slot]);
      ctx.position.push_back(i);
    }
    ++segments[slot];
  }
  return contexts;
}

std::vector<CorpusSample> load_corpus(const std::string& path, const Vocab& vocab) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open corpus '" + path + "'");
  const auto base = std::filesystem::path(path).parent_path();
  std::vector<CorpusSample> out;
  std::string line;
  std::int64_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto where = path + ":" + std::to_string(line_no);
    nlohmann::json record;
    try {
      record = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(where + ": " + e.what());
    }
    if (!record.is_object() || !record.contains("elements") || !record["elements"].is_array()) {
      throw FormatError(where + ": expected an object with an \"elements\" array");
    }
    CorpusSample sample;
    for (const auto& e : record["elements"]) {
      if (e.contains("text") && e["text"].is_array()) {
        std::vector<std::int64_t> ids;
        for (const auto& id : e["text"]) {
          if (!id.is_number_integer() || id.get<std::int64_t>() < 0 || id.get<std::int64_t>() >= vocab.text) {
            throw FormatError(where + ": text ids must be integers in [0, " + std::to_string(vocab.text) + ")");
          }
          ids.push_back(id.get<std::int64_t>());
        }
        sample.elements.push_back(Element::text(std::move(ids)));
      } else if (e.contains("image") && e["image"].is_string()) {
        std::filesystem::path p = e["image"].get<std::string>();
        if (p.is_relative()) p = base / p;
        sample.elements.push_back(Element::img(static_cast<std::int64_t>(sample.image_paths.size())));
        sample.image_paths.push_back(p.string());
      } else {
        throw FormatError(where + ": element must be {\"text\": [...]} or {\"image\": \"...\"}");
      }
    }
    if (sample.elements.empty()) throw FormatError(where + ": empty sample");
    out.push_back(std::move(sample));
  }
  return out;
}

}  // namespace mmi
