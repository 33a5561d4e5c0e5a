#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace mmi {

/// Text ids occupy [0, text); the special tokens follow.
struct Vocab {
  std::int64_t text = 256;

  [[nodiscard]] std::int64_t bos() const { return text; }
  [[nodiscard]] std::int64_t boi() const { return text + 1; }
  [[nodiscard]] std::int64_t eos() const { return text + 2; }
  [[nodiscard]] std::int64_t size() const { return text + 3; }
};

struct Element {
  enum class Kind { Text, Image };
  Kind kind = Kind::Text;
  std::vector<std::int64_t> tokens;  // Text
  std::int64_t image = -1;           // Image: caller-defined image id

  static Element text(std::vector<std::int64_t> ids) { return {Kind::Text, std::move(ids), -1}; }
  static Element img(std::int64_t id) { return {Kind::Image, {}, id}; }
  bool operator==(const Element&) const = default;
};

enum class SlotKind { BoS, EoS, BoI, Text, Image };

struct Slot {
  SlotKind kind = SlotKind::Text;
  std::int64_t value = 0;  // token id for Text, local image index for Image/BoI
  std::int64_t index = 0;  // visual slot 0..N−1 for Image

  bool operator==(const Slot&) const = default;
};

/// One training context: a stream of slots made of one or more packed
/// samples (segments). Image slots refer to `images` by local index.
struct PackedSequence {
  std::vector<Slot> stream;
  std::vector<std::int64_t> images;    // caller image ids, by local index
  std::vector<std::int64_t> segment;   // sample index of every position
  std::vector<std::int64_t> position;  // position within its sample
  std::int64_t tokens_per_image = 1;

  [[nodiscard]] std::int64_t size() const { return static_cast<std::int64_t>(stream.size()); }
  /// Stream position of the BoI of local image j.
  [[nodiscard]] std::int64_t boi_position(std::int64_t j) const;
  /// First position of the segment containing `pos`.
  [[nodiscard]] std::int64_t segment_start(std::int64_t pos) const;
  /// Token id of each slot in the model vocabulary; −1 for image slots.
  [[nodiscard]] std::vector<std::int64_t> token_ids(const Vocab& vocab) const;
};

/// [BoS, elements…, EoS] with each image expanded to BoI + N slots. With
/// `close` false the trailing EoS is omitted (generation prompts).
PackedSequence build(const std::vector<Element>& elements, std::int64_t tokens_per_image, const Vocab& vocab,
                     bool close = true);

/// Inverse of build for a single segment: adjacent text runs are merged.
std::vector<Element> parse_back(const PackedSequence& seq);

/// Visible local image indices per position, oldest first. By default image
/// j is visible from the position after its BoI onward (its own slots
/// included); `strict` hides it until after its last slot. Images never
/// cross segment boundaries.
std::vector<std::vector<std::int64_t>> visibility(const PackedSequence& seq, bool strict = false);

struct NtpTargets {
  std::vector<std::int64_t> targets;  // model vocabulary ids, 0 where masked
  std::vector<std::uint8_t> mask;
};

/// Position p predicts slot p+1. Masked: successors that are image slots or
/// BoS, and the last position of every segment.
NtpTargets ntp_targets(const PackedSequence& seq, const Vocab& vocab);

/// Greedy first-fit packing of whole samples into contexts of at most
/// max_len slots. Throws LengthError for a sample longer than max_len.
std::vector<PackedSequence> pack(const std::vector<PackedSequence>& samples, std::int64_t max_len);

/// One JSON-lines corpus record: elements plus the image paths their image
/// ids index.
struct CorpusSample {
  std::vector<Element> elements;
  std::vector<std::string> image_paths;
};

/// {"elements": [{"text": [ids]} | {"image": "path.ppm"}]} per line. Relative
/// image paths resolve against the corpus file's directory.
std::vector<CorpusSample> load_corpus(const std::string& path, const Vocab& vocab);

}  // namespace mmi
