#include "psumml/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "psumml/errors.hpp"

namespace psumml {

namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'P', 'S', 'M', 'L', 'C', 'K', 'P', '1'};

struct NamedBlob {
  std::string name;
  const std::vector<float>* data;
};

void collect_net_blobs(SegNet<float>& net, const std::string& prefix,
                       std::vector<NamedBlob>& out) {
  std::vector<ParamRef<float>> ps;
  std::vector<BufferRef<float>> bs;
  net.collect(ps, bs);
  for (const auto& p : ps) out.push_back({prefix + "." + p.name, p.value});
  for (const auto& b : bs) out.push_back({prefix + ".buf." + b.name, b.value});
}

void collect_disc_blobs(Discriminator<float>& d, const std::string& prefix,
                        std::vector<NamedBlob>& out) {
  for (const auto& p : d.params()) out.push_back({prefix + "." + p.name, p.value});
}

json disc_cfg_to_json(const DiscriminatorConfig& c, bool exists) {
  return json{{"exists", exists},
              {"in_channels", c.in_channels},
              {"width", c.width},
              {"out_channels", c.out_channels},
              {"stride", c.stride}};
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, Checkpoint& ckpt) {
  std::vector<NamedBlob> blobs;
  collect_net_blobs(ckpt.model, "model", blobs);
  for (int m = 0; m < 2; ++m)
    if (ckpt.disc_exists[m])
      collect_disc_blobs(ckpt.disc[m], m == 0 ? "disc_a" : "disc_b", blobs);
  for (std::size_t i = 0; i < ckpt.vel_seg.size(); ++i)
    blobs.push_back({"vel.seg." + std::to_string(i), &ckpt.vel_seg[i]});
  for (int m = 0; m < 2; ++m)
    for (std::size_t i = 0; i < ckpt.vel_disc[m].size(); ++i)
      blobs.push_back({std::string("vel.disc_") + (m == 0 ? "a" : "b") + "." + std::to_string(i),
                       &ckpt.vel_disc[m][i]});
  std::vector<int> snap_steps;
  for (std::size_t s = 0; s < ckpt.store.snapshots.size(); ++s) {
    snap_steps.push_back(ckpt.store.snapshots[s].first);
    collect_net_blobs(ckpt.store.snapshots[s].second, "snap" + std::to_string(s), blobs);
  }

  json header;
  header["version"] = ckpt.version;
  header["step"] = ckpt.step;
  header["scenario"] = {{"modality_a", ckpt.scenario.modality_a.classes()},
                        {"modality_b", ckpt.scenario.modality_b.classes()}};
  header["channel_layout"] =
      ChannelLayout::for_label_set(ckpt.scenario.global).channel_to_class;
  header["seg"] = {{"in_channels", ckpt.seg_cfg.in_channels},
                   {"base_width", ckpt.seg_cfg.base_width},
                   {"num_classes", ckpt.seg_cfg.num_classes}};
  header["disc"] = {{"a", disc_cfg_to_json(ckpt.disc_cfg[0], ckpt.disc_exists[0])},
                    {"b", disc_cfg_to_json(ckpt.disc_cfg[1], ckpt.disc_exists[1])}};
  header["store"] = {{"k", ckpt.store.k},
                     {"t0", ckpt.store.t0},
                     {"tk", ckpt.store.tk},
                     {"steps", snap_steps}};
  json dir = json::array();
  for (const auto& b : blobs) dir.push_back({{"name", b.name}, {"count", b.data->size()}});
  header["tensors"] = dir;
  header["config"] = ckpt.config_echo;
  const std::string htext = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint: " + path.string());
  out.write(kMagic, 8);
  const std::uint32_t ver = static_cast<std::uint32_t>(ckpt.version);
  out.write(reinterpret_cast<const char*>(&ver), 4);
  const std::uint64_t hlen = htext.size();
  out.write(reinterpret_cast<const char*>(&hlen), 8);
  out.write(htext.data(), static_cast<std::streamsize>(htext.size()));
  for (const auto& b : blobs)
    out.write(reinterpret_cast<const char*>(b.data->data()),
              static_cast<std::streamsize>(b.data->size() * sizeof(float)));
  if (!out) throw IoError("checkpoint write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("missing checkpoint: " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0)
    throw IoError("bad checkpoint magic: " + path.string());
  std::uint32_t ver = 0;
  in.read(reinterpret_cast<char*>(&ver), 4);
  if (ver != 1) throw IoError("unsupported checkpoint version " + std::to_string(ver));
  std::uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), 8);
  std::string htext(hlen, '\0');
  in.read(htext.data(), static_cast<std::streamsize>(hlen));
  json header = json::parse(htext);

  Checkpoint ckpt;
  ckpt.version = static_cast<int>(ver);
  ckpt.step = header.at("step").get<int>();
  const LabelSet la = LabelSet::from(header.at("scenario").at("modality_a").get<std::vector<int>>());
  const LabelSet lb = LabelSet::from(header.at("scenario").at("modality_b").get<std::vector<int>>());
  ckpt.scenario = ScenarioSpec::make(la, lb);
  ckpt.seg_cfg.in_channels = header.at("seg").at("in_channels").get<int>();
  ckpt.seg_cfg.base_width = header.at("seg").at("base_width").get<int>();
  ckpt.seg_cfg.num_classes = header.at("seg").at("num_classes").get<int>();
  ckpt.model.configure(ckpt.seg_cfg);
  for (int m = 0; m < 2; ++m) {
    const json& jd = header.at("disc").at(m == 0 ? "a" : "b");
    ckpt.disc_exists[m] = jd.at("exists").get<bool>();
    ckpt.disc_cfg[m].in_channels = jd.at("in_channels").get<int>();
    ckpt.disc_cfg[m].width = jd.at("width").get<int>();
    ckpt.disc_cfg[m].out_channels = jd.at("out_channels").get<int>();
    ckpt.disc_cfg[m].stride = jd.at("stride").get<int>();
    if (ckpt.disc_exists[m]) ckpt.disc[m].configure(ckpt.disc_cfg[m]);
  }
  ckpt.store.k = header.at("store").at("k").get<int>();
  ckpt.store.t0 = header.at("store").at("t0").get<int>();
  ckpt.store.tk = header.at("store").at("tk").get<int>();
  const std::vector<int> snap_steps = header.at("store").at("steps").get<std::vector<int>>();
  ckpt.config_echo = header.value("config", json::object());

  // Name -> destination buffer map mirroring save order.
  std::map<std::string, std::vector<float>*> dst;
  {
    std::vector<ParamRef<float>> ps;
    std::vector<BufferRef<float>> bs;
    ckpt.model.collect(ps, bs);
    for (auto& p : ps) dst["model." + p.name] = p.value;
    for (auto& b : bs) dst["model.buf." + b.name] = b.value;
  }
  for (int m = 0; m < 2; ++m)
    if (ckpt.disc_exists[m])
      for (auto& p : ckpt.disc[m].params())
        dst[std::string(m == 0 ? "disc_a." : "disc_b.") + p.name] = p.value;
  for (int s = 0; s < static_cast<int>(snap_steps.size()); ++s) {
    SegNet<float> snap;
    snap.configure(ckpt.seg_cfg);
    ckpt.store.snapshots.emplace_back(snap_steps[s], std::move(snap));
  }
  for (int s = 0; s < static_cast<int>(snap_steps.size()); ++s) {
    std::vector<ParamRef<float>> ps;
    std::vector<BufferRef<float>> bs;
    ckpt.store.snapshots[s].second.collect(ps, bs);
    const std::string prefix = "snap" + std::to_string(s);
    for (auto& p : ps) dst[prefix + "." + p.name] = p.value;
    for (auto& b : bs) dst[prefix + ".buf." + b.name] = b.value;
  }

  for (const json& t : header.at("tensors")) {
    const std::string name = t.at("name").get<std::string>();
    const std::size_t count = t.at("count").get<std::size_t>();
    std::vector<float>* target = nullptr;
    if (name.starts_with("vel.seg.")) {
      ckpt.vel_seg.emplace_back(count);
      target = &ckpt.vel_seg.back();
    } else if (name.starts_with("vel.disc_a.")) {
      ckpt.vel_disc[0].emplace_back(count);
      target = &ckpt.vel_disc[0].back();
    } else if (name.starts_with("vel.disc_b.")) {
      ckpt.vel_disc[1].emplace_back(count);
      target = &ckpt.vel_disc[1].back();
    } else {
      auto it = dst.find(name);
      if (it == dst.end()) throw IoError("checkpoint tensor with unknown name: " + name);
      target = it->second;
      if (target->size() != count)
        throw IoError("checkpoint tensor size mismatch for " + name);
    }
    target->resize(count);
    in.read(reinterpret_cast<char*>(target->data()),
            static_cast<std::streamsize>(count * sizeof(float)));
    if (!in) throw IoError("truncated checkpoint: " + path.string());
  }
  return ckpt;
}

}  // namespace psumml
