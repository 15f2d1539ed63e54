#pragma once

#include <vector>

#include "gridloop/world.hpp"

namespace gridloop {

enum class TokenClass { kSpecial, kColor, kQualifier, kCoord, kImage };

// Token id space: specials, color words, qualifier words, coordinate bins
// (one per grid line), then the image codebook. Ranges are disjoint and
// cover [0, total).
struct Vocab {
  // special ids
  static constexpr int kBos = 0;
  static constexpr int kEosG = 1;
  static constexpr int kEosI = 2;  // reserved; image length is fixed, no terminator
  static constexpr int kObjOpen = 3;
  static constexpr int kObjClose = 4;
  static constexpr int kPad = 5;
  static constexpr int kNumSpecial = 6;

  int h = 0, w = 0, colors = 0, k_max = 0, v_img = 0;
  int color_lo = 0, qual_lo = 0, coord_lo = 0, n_coord = 0, img_lo = 0, total = 0;

  static Vocab build(const WorldConfig& cfg);

  int color_id(int c) const { return color_lo + c; }
  int qual_id(Qualifier q) const { return qual_lo + static_cast<int>(q); }
  int coord_id(int line) const { return coord_lo + line; }
  int img_id(int code) const { return img_lo + code; }

  TokenClass classify(int id) const;
  bool is_color(int id) const { return id >= color_lo && id < color_lo + colors; }
  bool is_qual(int id) const { return id >= qual_lo && id < qual_lo + kNumQualifiers; }
  bool is_coord(int id) const { return id >= coord_lo && id < coord_lo + n_coord; }
  bool is_image(int id) const { return id >= img_lo && id < img_lo + v_img; }

  // Canonical position ids: G1 occupies [0, g1_max), the image segment
  // [g1_max, g1_max + h*w), G2 the rest. Fixed bases keep the positions a
  // segment token sees identical across packed training and the standalone
  // generation/grounding passes, whatever the layout length is.
  int g1_max() const { return 2 + 7 * k_max; }
  int img_len() const { return h * w; }
  int img_pos_base() const { return g1_max(); }
  int g2_pos_base() const { return g1_max() + img_len(); }
  int t_max() const { return 2 * g1_max() + img_len(); }
};

// [BOS, (OBJ_OPEN color qual x0 y0 x1 y1 OBJ_CLOSE)*, EOS_G]
std::vector<int> encode_layout(const Layout& layout, const Vocab& v);

enum class ParseStatus { kOk, kGrammarError, kRangeError, kTruncatedError };

struct LayoutParse {
  ParseStatus status = ParseStatus::kOk;
  Layout layout;       // valid iff status == kOk
  int error_pos = -1;  // first offending token index
  bool ok() const { return status == ParseStatus::kOk; }
};

// Strict grammar parse of arbitrary token output; never throws.
LayoutParse decode_layout(const std::vector<int>& tokens, const Vocab& v);

std::vector<int> encode_image(const GridImage& image, const Vocab& v);
GridImage decode_image(const std::vector<int>& tokens, const Vocab& v);  // WrongLength / IdOutOfRange

enum class Segment : uint8_t { kG1 = 0, kImg = 1, kG2 = 2 };

// 3x3 segment visibility; row = attending segment, col = attended segment.
struct MaskSpec {
  bool allowed[3][3] = {
      {true, false, false},   // G1 sees G1
      {true, true, false},    // IMG sees G1, IMG
      {false, true, true},    // G2 sees IMG, G2 — never G1
  };
  void validate() const;
};

struct PackedSequence {
  std::vector<int> tokens;
  std::vector<Segment> segment;
  std::vector<uint8_t> target_mask;  // true on positions whose token is a loss target
  std::vector<int> positions;        // canonical position ids
  std::vector<uint8_t> attn;         // T*T row-major; attn[t*T+q] = t may attend q
  int length() const { return static_cast<int>(tokens.size()); }
  bool may_attend(int t, int q) const { return attn[static_cast<size_t>(t) * tokens.size() + q] != 0; }
};

// Builds [G1, IMG, G2] with the task mask, canonical positions and loss
// targets (image tokens and the G2 tokens after the prompt BOS).
PackedSequence pack_pretrain(const Layout& layout, const GridImage& image,
                             const Vocab& v, const MaskSpec& spec = MaskSpec{});

}  // namespace gridloop
