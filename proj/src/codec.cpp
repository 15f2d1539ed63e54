#include "gridloop/codec.hpp"

#include <algorithm>

namespace gridloop {

Vocab Vocab::build(const WorldConfig& cfg) {
  Vocab v;
  v.h = cfg.h;
  v.w = cfg.w;
  v.colors = cfg.colors;
  v.k_max = cfg.k_max;
  v.v_img = cfg.image_vocab();
  if (v.v_img < cfg.colors + 1) throw std::invalid_argument("v_img < colors + 1");
  v.color_lo = kNumSpecial;
  v.qual_lo = v.color_lo + v.colors;
  v.coord_lo = v.qual_lo + kNumQualifiers;
  v.n_coord = std::max(cfg.h, cfg.w) + 1;
  v.img_lo = v.coord_lo + v.n_coord;
  v.total = v.img_lo + v.v_img;
  return v;
}

TokenClass Vocab::classify(int id) const {
  if (id < 0 || id >= total) throw IdOutOfRange("token id outside vocab");
  if (id < kNumSpecial) return TokenClass::kSpecial;
  if (id < qual_lo) return TokenClass::kColor;
  if (id < coord_lo) return TokenClass::kQualifier;
  if (id < img_lo) return TokenClass::kCoord;
  return TokenClass::kImage;
}

// 7 tokens per item: OBJ_OPEN color qual x0 y0 x1 y1. Items are fixed-width,
// so no closing delimiter is needed; OBJ_CLOSE stays a reserved id.
std::vector<int> encode_layout(const Layout& layout, const Vocab& v) {
  std::vector<int> out;
  out.reserve(2 + 7 * layout.items.size());
  out.push_back(Vocab::kBos);
  for (const auto& it : layout.items) {
    out.push_back(Vocab::kObjOpen);
    out.push_back(v.color_id(it.expr.color));
    out.push_back(v.qual_id(it.expr.qual));
    out.push_back(v.coord_id(it.box.x0));
    out.push_back(v.coord_id(it.box.y0));
    out.push_back(v.coord_id(it.box.x1));
    out.push_back(v.coord_id(it.box.y1));
  }
  out.push_back(Vocab::kEosG);
  return out;
}

LayoutParse decode_layout(const std::vector<int>& tokens, const Vocab& v) {
  LayoutParse res;
  auto fail = [&](ParseStatus st, int pos) {
    res.status = st;
    res.error_pos = pos;
    res.layout.items.clear();
    return res;
  };
  size_t n = tokens.size();
  size_t i = 0;
  auto truncated = [&] { return fail(ParseStatus::kTruncatedError, static_cast<int>(n)); };

  if (n == 0) return truncated();
  if (tokens[0] != Vocab::kBos) return fail(ParseStatus::kGrammarError, 0);
  i = 1;
  while (true) {
    if (i >= n) return truncated();
    if (tokens[i] == Vocab::kEosG) {
      ++i;
      break;
    }
    if (tokens[i] != Vocab::kObjOpen) return fail(ParseStatus::kGrammarError, static_cast<int>(i));
    ++i;
    LayoutItem it;
    if (i >= n) return truncated();
    if (!v.is_color(tokens[i])) return fail(ParseStatus::kGrammarError, static_cast<int>(i));
    it.expr.color = tokens[i] - v.color_lo;
    ++i;
    if (i >= n) return truncated();
    if (!v.is_qual(tokens[i])) return fail(ParseStatus::kGrammarError, static_cast<int>(i));
    it.expr.qual = static_cast<Qualifier>(tokens[i] - v.qual_lo);
    ++i;
    int coords[4];
    for (int c = 0; c < 4; ++c) {
      if (i >= n) return truncated();
      if (!v.is_coord(tokens[i])) return fail(ParseStatus::kGrammarError, static_cast<int>(i));
      coords[c] = tokens[i] - v.coord_lo;
      ++i;
    }
    it.box = {coords[0], coords[1], coords[2], coords[3]};
    if (it.box.x0 >= it.box.x1 || it.box.y0 >= it.box.y1 ||
        it.box.x1 > v.w || it.box.y1 > v.h)
      return fail(ParseStatus::kRangeError, static_cast<int>(i) - 1);
    res.layout.items.push_back(it);
  }
  if (i != n) return fail(ParseStatus::kGrammarError, static_cast<int>(i));
  return res;
}

std::vector<int> encode_image(const GridImage& image, const Vocab& v) {
  if (image.h != v.h || image.w != v.w)
    throw ShapeError("image dims do not match vocab");
  std::vector<int> out;
  out.reserve(image.cells.size());
  for (int c : image.cells) {
    if (c < 0 || c >= v.v_img) throw IdOutOfRange("cell id outside codebook");
    out.push_back(v.img_id(c));
  }
  return out;
}

GridImage decode_image(const std::vector<int>& tokens, const Vocab& v) {
  if (tokens.size() != static_cast<size_t>(v.h) * v.w)
    throw WrongLength("image token count != H*W");
  GridImage img;
  img.h = v.h;
  img.w = v.w;
  img.cells.reserve(tokens.size());
  for (int t : tokens) {
    if (!v.is_image(t)) throw IdOutOfRange("token outside image range");
    img.cells.push_back(t - v.img_lo);
  }
  return img;
}

void MaskSpec::validate() const {
  for (int s = 0; s < 3; ++s)
    if (!allowed[s][s]) throw std::invalid_argument("mask diagonal must be true");
  if (allowed[2][0]) throw std::invalid_argument("G2 must not see G1");
}

PackedSequence pack_pretrain(const Layout& layout, const GridImage& image,
                             const Vocab& v, const MaskSpec& spec) {
  spec.validate();
  std::vector<int> g = encode_layout(layout, v);
  std::vector<int> im = encode_image(image, v);

  PackedSequence p;
  int g_len = static_cast<int>(g.size());
  int t_total = 2 * g_len + static_cast<int>(im.size());
  p.tokens.reserve(t_total);
  p.segment.reserve(t_total);
  p.positions.reserve(t_total);

  auto push = [&](int tok, Segment seg, int pos, bool target) {
    p.tokens.push_back(tok);
    p.segment.push_back(seg);
    p.positions.push_back(pos);
    p.target_mask.push_back(target ? 1 : 0);
  };
  for (int i = 0; i < g_len; ++i) push(g[i], Segment::kG1, i, false);
  for (size_t i = 0; i < im.size(); ++i)
    push(im[i], Segment::kImg, v.img_pos_base() + static_cast<int>(i), true);
  // G2 BOS is a prompt, not a target: the grounding loss must match a
  // standalone [IMG, G2] pass term for term.
  for (int i = 0; i < g_len; ++i)
    push(g[i], Segment::kG2, v.g2_pos_base() + i, i > 0);

  p.attn.assign(static_cast<size_t>(t_total) * t_total, 0);
  for (int t = 0; t < t_total; ++t) {
    int st = static_cast<int>(p.segment[t]);
    for (int q = 0; q <= t; ++q) {
      int sq = static_cast<int>(p.segment[q]);
      if (spec.allowed[st][sq])
        p.attn[static_cast<size_t>(t) * t_total + q] = 1;
    }
  }
  return p;
}

}  // namespace gridloop
