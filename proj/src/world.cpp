#include "gridloop/world.hpp"

#include <algorithm>
#include <array>

#include "json.hpp"

namespace gridloop {

namespace {

const std::array<const char*, kNumQualifiers> kQualNames = {
    "none", "leftmost", "rightmost", "topmost", "bottommost", "largest", "smallest"};

bool boxes_overlap(const Box& a, const Box& b) {
  return a.x0 < b.x1 && b.x0 < a.x1 && a.y0 < b.y1 && b.y0 < a.y1;
}

}  // namespace

const char* qualifier_name(Qualifier q) { return kQualNames[static_cast<int>(q)]; }

std::optional<Qualifier> qualifier_from_name(const std::string& name) {
  for (int i = 0; i < kNumQualifiers; ++i)
    if (name == kQualNames[i]) return static_cast<Qualifier>(i);
  return std::nullopt;
}

void validate_layout(const Layout& layout, const WorldConfig& cfg) {
  const auto& items = layout.items;
  if (items.size() < 2 || items.size() > static_cast<size_t>(cfg.k_max))
    throw std::invalid_argument("layout item count outside [2, k_max]");
  for (const auto& it : items) {
    const Box& b = it.box;
    if (b.x0 < 0 || b.y0 < 0 || b.x1 > cfg.w || b.y1 > cfg.h)
      throw OutOfBounds("box exceeds grid");
    if (b.x0 >= b.x1 || b.y0 >= b.y1)
      throw std::invalid_argument("empty box");
    if (it.expr.color < 0 || it.expr.color >= cfg.colors)
      throw std::invalid_argument("color id out of range");
  }
  for (size_t i = 0; i < items.size(); ++i)
    for (size_t j = i + 1; j < items.size(); ++j)
      if (boxes_overlap(items[i].box, items[j].box))
        throw OverlapError("layout boxes overlap");
}

GridImage render(const Layout& layout, const WorldConfig& cfg) {
  for (const auto& it : layout.items) {
    const Box& b = it.box;
    if (b.x0 < 0 || b.y0 < 0 || b.x1 > cfg.w || b.y1 > cfg.h)
      throw OutOfBounds("box exceeds grid");
  }
  for (size_t i = 0; i < layout.items.size(); ++i)
    for (size_t j = i + 1; j < layout.items.size(); ++j)
      if (boxes_overlap(layout.items[i].box, layout.items[j].box))
        throw OverlapError("boxes overlap");

  GridImage img;
  img.h = cfg.h;
  img.w = cfg.w;
  img.cells.assign(static_cast<size_t>(cfg.h) * cfg.w, 0);
  for (const auto& it : layout.items) {
    for (int y = it.box.y0; y < it.box.y1; ++y)
      for (int x = it.box.x0; x < it.box.x1; ++x)
        img.at(x, y) = it.expr.color + 1;
  }
  return img;
}

namespace {

struct Component {
  Box box;
  int cells = 0;
};

// 4-connected components of one cell id, in scan order.
std::vector<Component> components_of(const GridImage& img, int id) {
  std::vector<Component> out;
  std::vector<char> seen(img.cells.size(), 0);
  std::vector<int> stack;
  for (int y = 0; y < img.h; ++y) {
    for (int x = 0; x < img.w; ++x) {
      int idx = y * img.w + x;
      if (seen[idx] || img.cells[idx] != id) continue;
      Component c;
      c.box = {x, y, x + 1, y + 1};
      stack.assign(1, idx);
      seen[idx] = 1;
      while (!stack.empty()) {
        int cur = stack.back();
        stack.pop_back();
        ++c.cells;
        int cx = cur % img.w, cy = cur / img.w;
        c.box.x0 = std::min(c.box.x0, cx);
        c.box.y0 = std::min(c.box.y0, cy);
        c.box.x1 = std::max(c.box.x1, cx + 1);
        c.box.y1 = std::max(c.box.y1, cy + 1);
        const int nx[4] = {cx - 1, cx + 1, cx, cx};
        const int ny[4] = {cy, cy, cy - 1, cy + 1};
        for (int k = 0; k < 4; ++k) {
          if (nx[k] < 0 || nx[k] >= img.w || ny[k] < 0 || ny[k] >= img.h) continue;
          int nidx = ny[k] * img.w + nx[k];
          if (!seen[nidx] && img.cells[nidx] == id) {
            seen[nidx] = 1;
            stack.push_back(nidx);
          }
        }
      }
      out.push_back(c);
    }
  }
  return out;
}

}  // namespace

bool qualifier_prefers(const Box& a, const Box& b, Qualifier q) {
  long ka = 0, kb = 0;
  switch (q) {
    case Qualifier::kLeftmost:   ka = a.x0; kb = b.x0; break;
    case Qualifier::kRightmost:  ka = -a.x1; kb = -b.x1; break;
    case Qualifier::kTopmost:    ka = a.y0; kb = b.y0; break;
    case Qualifier::kBottommost: ka = -a.y1; kb = -b.y1; break;
    case Qualifier::kLargest:    ka = -a.area(); kb = -b.area(); break;
    case Qualifier::kSmallest:   ka = a.area(); kb = b.area(); break;
    case Qualifier::kNone:       break;
  }
  if (ka != kb) return ka < kb;
  if (a.y0 != b.y0) return a.y0 < b.y0;
  return a.x0 < b.x0;
}

Box ground_oracle(const GridImage& image, const Expression& expr) {
  auto comps = components_of(image, expr.color + 1);
  if (comps.empty()) throw NotFound("no component of requested color");
  if (expr.qual == Qualifier::kNone && comps.size() > 1)
    throw Ambiguous("qualifier 'none' with multiple components");
  const Component* best = &comps[0];
  for (size_t i = 1; i < comps.size(); ++i)
    if (qualifier_prefers(comps[i].box, best->box, expr.qual)) best = &comps[i];
  return best->box;
}

std::vector<Detection> detect_components(const GridImage& image) {
  std::vector<Detection> out;
  int max_id = 0;
  for (int v : image.cells) max_id = std::max(max_id, v);
  for (int id = 1; id <= max_id; ++id) {
    for (const auto& c : components_of(image, id)) {
      Detection d;
      d.color = id - 1;
      d.box = c.box;
      d.score = static_cast<double>(c.cells) / static_cast<double>(c.box.area());
      out.push_back(d);
    }
  }
  return out;
}

Layout sample_layout(Rng& rng, const WorldConfig& cfg, int max_attempts) {
  if (cfg.k_max < 2 || cfg.min_box_side < 1 ||
      cfg.min_box_side > cfg.w || cfg.min_box_side > cfg.h)
    throw std::invalid_argument("bad world config");
  // box sides capped at roughly half the grid so several boxes fit
  int max_w = std::max(cfg.min_box_side, cfg.w / 2);
  int max_h = std::max(cfg.min_box_side, cfg.h / 2);

  for (int attempt = 0; attempt < max_attempts; ++attempt) {
    int k = 2 + rng.uniform_int(cfg.k_max - 1);
    Layout layout;
    bool ok = true;
    for (int i = 0; i < k && ok; ++i) {
      bool placed = false;
      for (int t = 0; t < 64 && !placed; ++t) {
        int bw = cfg.min_box_side + rng.uniform_int(max_w - cfg.min_box_side + 1);
        int bh = cfg.min_box_side + rng.uniform_int(max_h - cfg.min_box_side + 1);
        Box b;
        b.x0 = rng.uniform_int(cfg.w - bw + 1);
        b.y0 = rng.uniform_int(cfg.h - bh + 1);
        b.x1 = b.x0 + bw;
        b.y1 = b.y0 + bh;
        bool clash = false;
        for (const auto& prev : layout.items)
          if (boxes_overlap(prev.box, b)) { clash = true; break; }
        if (clash) continue;
        LayoutItem it;
        it.box = b;
        it.expr.color = rng.uniform_int(cfg.colors);
        it.expr.qual = static_cast<Qualifier>(rng.uniform_int(kNumQualifiers));
        layout.items.push_back(it);
        placed = true;
      }
      ok = placed;
    }
    if (!ok) continue;
    // canonical scan order: the rendered image then determines the item
    // sequence, keeping the layout -> image map invertible up to qualifiers
    std::sort(layout.items.begin(), layout.items.end(),
              [](const LayoutItem& a, const LayoutItem& b) {
                return std::pair(a.box.y0, a.box.x0) < std::pair(b.box.y0, b.box.x0);
              });

    // every expression must ground back to its own box exactly
    GridImage img = render(layout, cfg);
    bool resolves = true;
    for (const auto& it : layout.items) {
      try {
        if (ground_oracle(img, it.expr) != it.box) { resolves = false; break; }
      } catch (const NotFound&) { resolves = false; break; }
      catch (const Ambiguous&) { resolves = false; break; }
    }
    if (resolves) return layout;
  }
  throw SamplingExhausted("layout sampling exhausted retry budget");
}

double iou(const Box& a, const Box& b) {
  long ix0 = std::max(a.x0, b.x0), iy0 = std::max(a.y0, b.y0);
  long ix1 = std::min(a.x1, b.x1), iy1 = std::min(a.y1, b.y1);
  long inter = std::max(0l, ix1 - ix0) * std::max(0l, iy1 - iy0);
  long uni = a.area() + b.area() - inter;
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

std::string to_json(const Layout& layout, const WorldConfig& cfg, const GridImage* image) {
  nlohmann::ordered_json j;
  j["H"] = cfg.h;
  j["W"] = cfg.w;
  j["items"] = nlohmann::ordered_json::array();
  for (const auto& it : layout.items) {
    nlohmann::ordered_json ji;
    ji["color"] = it.expr.color;
    ji["qual"] = qualifier_name(it.expr.qual);
    ji["box"] = {it.box.x0, it.box.y0, it.box.x1, it.box.y1};
    j["items"].push_back(ji);
  }
  if (image != nullptr) j["cells"] = image->cells;
  return j.dump();
}

WorldRecord world_record_from_json(const std::string& text) {
  auto j = nlohmann::json::parse(text);
  WorldRecord rec;
  rec.h = j.at("H").get<int>();
  rec.w = j.at("W").get<int>();
  for (const auto& ji : j.at("items")) {
    LayoutItem it;
    it.expr.color = ji.at("color").get<int>();
    auto q = qualifier_from_name(ji.at("qual").get<std::string>());
    if (!q) throw std::invalid_argument("unknown qualifier");
    it.expr.qual = *q;
    auto b = ji.at("box");
    it.box = {b.at(0).get<int>(), b.at(1).get<int>(), b.at(2).get<int>(), b.at(3).get<int>()};
    rec.layout.items.push_back(it);
  }
  if (j.contains("cells")) {
    GridImage img;
    img.h = rec.h;
    img.w = rec.w;
    img.cells = j.at("cells").get<std::vector<int>>();
    if (img.cells.size() != static_cast<size_t>(rec.h) * rec.w)
      throw WrongLength("cells length != H*W");
    rec.image = std::move(img);
  }
  return rec;
}

}  // namespace gridloop
