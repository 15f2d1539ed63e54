#include "gridloop/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "json.hpp"

namespace gridloop {

namespace {

using ordered_json = nlohmann::ordered_json;

template <class T>
void write_blob(std::ofstream& os, const std::vector<T>& v) {
  os.write(reinterpret_cast<const char*>(v.data()),
           static_cast<std::streamsize>(v.size() * sizeof(T)));
}

std::vector<char> read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw BadCheckpoint("cannot open " + path);
  is.seekg(0, std::ios::end);
  std::vector<char> buf(static_cast<size_t>(is.tellg()));
  is.seekg(0);
  is.read(buf.data(), static_cast<std::streamsize>(buf.size()));
  return buf;
}

}  // namespace

void save_checkpoint(const std::string& base, const Model<float>& model,
                     const WorldConfig& world) {
  ordered_json j;
  j["format"] = "f32le";
  j["config"] = {{"vocab", model.cfg.vocab}, {"dim", model.cfg.dim},
                 {"layers", model.cfg.layers}, {"heads", model.cfg.heads},
                 {"t_max", model.cfg.t_max}, {"mlp_mult", model.cfg.mlp_mult},
                 {"init_std", model.cfg.init_std}};
  j["world"] = {{"H", world.h}, {"W", world.w}, {"colors", world.colors},
                {"k_max", world.k_max}, {"min_box_side", world.min_box_side},
                {"v_img", world.image_vocab()}};
  Vocab v = Vocab::build(world);
  j["vocab_ranges"] = {{"special", Vocab::kNumSpecial}, {"color_lo", v.color_lo},
                       {"qual_lo", v.qual_lo}, {"coord_lo", v.coord_lo},
                       {"n_coord", v.n_coord}, {"img_lo", v.img_lo},
                       {"total", v.total}};
  size_t offset = 0;
  j["tensors"] = ordered_json::array();
  for (const auto& t : model.params.t) {
    j["tensors"].push_back({{"name", t.name}, {"rows", t.rows}, {"cols", t.cols},
                            {"offset", offset}});
    offset += t.size() * sizeof(float);
  }
  j["blob_bytes"] = offset;

  std::ofstream mf(base + ".json");
  if (!mf) throw BadCheckpoint("cannot write " + base + ".json");
  mf << j.dump(2) << "\n";
  std::ofstream bf(base + ".bin", std::ios::binary);
  if (!bf) throw BadCheckpoint("cannot write " + base + ".bin");
  for (const auto& t : model.params.t) write_blob(bf, t.w);
}

LoadedCheckpoint load_checkpoint(const std::string& base) {
  ordered_json j;
  {
    std::ifstream mf(base + ".json");
    if (!mf) throw BadCheckpoint("cannot open " + base + ".json");
    mf >> j;
  }
  if (j.at("format").get<std::string>() != "f32le")
    throw BadCheckpoint("unknown checkpoint format");
  LoadedCheckpoint out;
  const auto& w = j.at("world");
  out.world.h = w.at("H").get<int>();
  out.world.w = w.at("W").get<int>();
  out.world.colors = w.at("colors").get<int>();
  out.world.k_max = w.at("k_max").get<int>();
  out.world.min_box_side = w.at("min_box_side").get<int>();
  out.world.v_img = w.at("v_img").get<int>();
  out.vocab = Vocab::build(out.world);

  ModelConfig mc;
  const auto& c = j.at("config");
  mc.vocab = c.at("vocab").get<int>();
  mc.dim = c.at("dim").get<int>();
  mc.layers = c.at("layers").get<int>();
  mc.heads = c.at("heads").get<int>();
  mc.t_max = c.at("t_max").get<int>();
  mc.mlp_mult = c.at("mlp_mult").get<int>();
  mc.init_std = c.at("init_std").get<double>();
  if (mc.vocab != out.vocab.total)
    throw BadCheckpoint("vocab size does not match world");
  out.model = Model<float>::init(mc, 0);

  auto blob = read_file(base + ".bin");
  if (blob.size() != j.at("blob_bytes").get<size_t>())
    throw BadCheckpoint("blob size mismatch");
  const auto& tensors = j.at("tensors");
  if (tensors.size() != out.model.params.t.size())
    throw BadCheckpoint("tensor count mismatch");
  for (size_t i = 0; i < tensors.size(); ++i) {
    auto& t = out.model.params.t[i];
    if (tensors[i].at("name").get<std::string>() != t.name ||
        tensors[i].at("rows").get<int>() != t.rows ||
        tensors[i].at("cols").get<int>() != t.cols)
      throw BadCheckpoint("tensor layout mismatch at " + t.name);
    size_t off = tensors[i].at("offset").get<size_t>();
    if (off + t.size() * sizeof(float) > blob.size())
      throw BadCheckpoint("tensor offset outside blob");
    std::memcpy(t.w.data(), blob.data() + off, t.size() * sizeof(float));
  }
  return out;
}

void save_train_state(const std::string& base, const AdamW<float>& opt,
                      const TrainState& ts) {
  ordered_json j;
  j["step"] = ts.step;
  j["adam_step"] = opt.step_count;
  j["lr"] = opt.lr;
  j["rng"] = {{"data", ts.data_rng}, {"aux", ts.aux_rng}};
  std::ofstream mf(base + ".json");
  mf << j.dump(2) << "\n";
  std::ofstream bf(base + ".bin", std::ios::binary);
  for (const auto& t : opt.m) write_blob(bf, t);
  for (const auto& t : opt.v) write_blob(bf, t);
}

void load_train_state(const std::string& base, AdamW<float>& opt, TrainState& ts) {
  ordered_json j;
  {
    std::ifstream mf(base + ".json");
    if (!mf) throw BadCheckpoint("cannot open " + base + ".json");
    mf >> j;
  }
  ts.step = j.at("step").get<long>();
  opt.step_count = j.at("adam_step").get<long>();
  ts.data_rng = j.at("rng").at("data").get<std::string>();
  ts.aux_rng = j.at("rng").at("aux").get<std::string>();
  auto blob = read_file(base + ".bin");
  size_t off = 0;
  auto read_into = [&](std::vector<float>& v) {
    if (off + v.size() * sizeof(float) > blob.size())
      throw BadCheckpoint("train state blob too small");
    std::memcpy(v.data(), blob.data() + off, v.size() * sizeof(float));
    off += v.size() * sizeof(float);
  };
  for (auto& t : opt.m) read_into(t);
  for (auto& t : opt.v) read_into(t);
  if (off != blob.size()) throw BadCheckpoint("train state blob size mismatch");
}

}  // namespace gridloop
