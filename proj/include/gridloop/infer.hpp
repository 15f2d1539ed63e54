#pragma once

#include <optional>

#include "gridloop/codec.hpp"
#include "gridloop/model.hpp"

namespace gridloop {

// Inference passes shared by training stages and evaluation. Two pass shapes
// exist: generation [G1, IMG] and grounding [IMG, G2]; both use canonical
// segment positions so they match what packed pretraining exposed the model
// to. Image positions decode from the image-token range only (renormalized),
// so generated grids always parse; layout-side decoding is unrestricted and
// may fail to parse, which callers score as a miss.

template <class S>
struct GenerationResult {
  std::vector<int> tokens;       // absolute ids in the image range, length H*W
  std::vector<double> logprobs;  // per step, under the sampling policy
};

template <class S>
GenerationResult<S> generate_image(const Model<S>& m, const Vocab& v,
                                   const Layout& layout, double temperature = 0.0,
                                   Rng* rng = nullptr) {
  Tape<S> tape(m.params);
  SeqRun<S> run(tape, m);
  auto g1 = encode_layout(layout, v);
  for (size_t i = 0; i < g1.size(); ++i) run.append_token(g1[i], static_cast<int>(i));
  GenerationResult<S> out;
  int hw = v.img_len();
  out.tokens.reserve(hw);
  out.logprobs.reserve(hw);
  for (int t = 0; t < hw; ++t) {
    StepSample s = (temperature > 0 && rng != nullptr)
                       ? pick_categorical(tape, run.last_logits(), v.img_lo, v.v_img,
                                          temperature, *rng)
                       : pick_greedy(tape, run.last_logits(), v.img_lo, v.v_img);
    int tok = v.img_lo + s.index;
    out.tokens.push_back(tok);
    out.logprobs.push_back(s.logprob);
    if (t + 1 < hw) run.append_token(tok, v.img_pos_base() + t);
  }
  return out;
}

template <class S>
struct GroundingResult {
  std::optional<Box> box;
};

// Grounds expressions through the model's image-to-layout direction: one
// greedy layout decode yields the model's instances, and each query picks
// among the decoded boxes of its color by the qualifier's own ordering.
// No oracle sees the image; a query whose color never appears in the decode
// stays unresolved.
template <class S>
std::vector<GroundingResult<S>> ground_expressions(
    const Model<S>& m, const Vocab& v, std::span<const int> image_tokens,
    std::span<const Expression> exprs);

template <class S>
struct FreeDecodeResult {
  LayoutParse parse;
  std::vector<int> tokens;
  bool truncated = false;  // hit the length cap before EOS_G
};

// Image-to-layout free decoding: greedy over the full vocabulary until EOS_G
// or the structural cap (the G2 segment cannot exceed g1_max positions).
template <class S>
FreeDecodeResult<S> free_decode_layout(const Model<S>& m, const Vocab& v,
                                       std::span<const int> image_tokens) {
  if (image_tokens.size() != static_cast<size_t>(v.img_len()))
    throw WrongLength("image prefix must be H*W tokens");
  Tape<S> tape(m.params);
  SeqRun<S> run(tape, m);
  for (size_t i = 0; i < image_tokens.size(); ++i)
    run.append_token(image_tokens[i], v.img_pos_base() + static_cast<int>(i));
  FreeDecodeResult<S> out;
  int base = v.g2_pos_base();
  run.append_token(Vocab::kBos, base);
  out.tokens.push_back(Vocab::kBos);
  int cap = v.g1_max() - 1;
  out.truncated = true;
  for (int t = 0; t < cap; ++t) {
    StepSample s = pick_greedy(tape, run.last_logits(), 0, v.total);
    out.tokens.push_back(s.index);
    if (s.index == Vocab::kEosG) {
      out.truncated = false;
      break;
    }
    if (t + 1 < cap) run.append_token(s.index, base + 1 + t);
  }
  out.parse = decode_layout(out.tokens, v);
  return out;
}

// Complete, range-valid items from a decoded token stream, up to the first
// malformation; used when grounding must salvage what it can from arbitrary
// model output.
inline std::vector<LayoutItem> parse_items_lenient(std::span<const int> tokens,
                                                   const Vocab& v) {
  std::vector<LayoutItem> items;
  size_t i = 0;
  if (i >= tokens.size() || tokens[i] != Vocab::kBos) return items;
  ++i;
  while (i + 6 < tokens.size() && tokens[i] == Vocab::kObjOpen) {
    if (!v.is_color(tokens[i + 1]) || !v.is_qual(tokens[i + 2])) break;
    bool coords_ok = true;
    for (int c = 0; c < 4; ++c) coords_ok = coords_ok && v.is_coord(tokens[i + 3 + c]);
    if (!coords_ok) break;
    LayoutItem it;
    it.expr.color = tokens[i + 1] - v.color_lo;
    it.expr.qual = static_cast<Qualifier>(tokens[i + 2] - v.qual_lo);
    it.box = {tokens[i + 3] - v.coord_lo, tokens[i + 4] - v.coord_lo,
              tokens[i + 5] - v.coord_lo, tokens[i + 6] - v.coord_lo};
    if (it.box.x0 >= it.box.x1 || it.box.y0 >= it.box.y1 || it.box.x1 > v.w ||
        it.box.y1 > v.h)
      break;
    items.push_back(it);
    i += 7;
  }
  return items;
}

template <class S>
std::vector<GroundingResult<S>> ground_expressions(
    const Model<S>& m, const Vocab& v, std::span<const int> image_tokens,
    std::span<const Expression> exprs) {
  auto dec = free_decode_layout(m, v, image_tokens);
  auto items = parse_items_lenient(dec.tokens, v);
  std::vector<GroundingResult<S>> out(exprs.size());
  for (size_t k = 0; k < exprs.size(); ++k) {
    std::optional<Box> best;
    for (const auto& it : items) {
      if (it.expr.color != exprs[k].color) continue;
      if (!best || qualifier_prefers(it.box, *best, exprs[k].qual)) best = it.box;
    }
    out[k].box = best;
  }
  return out;
}

// Full L-I-L pass with greedy decoding at both ends; boxes matched by item
// index, a missing or unparsed item scoring zero.
struct CycleStats {
  double mean_iou = 0;
  bool parse_ok = true;
  double cell_accuracy = 0;  // generated grid vs oracle render
};

template <class S>
CycleStats cycle_stats(const Model<S>& m, const Vocab& v, const WorldConfig& world,
                       const Layout& layout) {
  auto gen = generate_image(m, v, layout);
  GridImage got = decode_image(gen.tokens, v);
  GridImage want = render(layout, world);
  int same = 0;
  for (size_t i = 0; i < got.cells.size(); ++i)
    if (got.cells[i] == want.cells[i]) ++same;

  CycleStats st;
  st.cell_accuracy = static_cast<double>(same) / static_cast<double>(got.cells.size());
  auto dec = free_decode_layout(m, v, gen.tokens);
  st.parse_ok = dec.parse.ok();
  double s = 0;
  size_t k = layout.items.size();
  if (dec.parse.ok()) {
    for (size_t i = 0; i < k; ++i)
      if (i < dec.parse.layout.items.size())
        s += iou(layout.items[i].box, dec.parse.layout.items[i].box);
  }
  st.mean_iou = s / static_cast<double>(k);
  return st;
}

// held-out split, deterministic in its seed
inline std::vector<Layout> make_holdout(const WorldConfig& world, uint64_t seed,
                                        int n) {
  Rng rng(Rng::derive(seed, 0x401d0));
  std::vector<Layout> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) out.push_back(sample_layout(rng, world));
  return out;
}

}  // namespace gridloop
