#include "amalgam/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>
#include <zlib.h>

#include "amalgam/error.hpp"

namespace amalgam {

static_assert(std::endian::native == std::endian::little,
              "blob encoding assumes a little-endian host");

using nlohmann::json;

namespace {

constexpr char kCheckpointMagic[] = "KACKPT01";
constexpr char kTensorMagic[] = "KATENS01";
constexpr char kDatasetMagic[] = "KADSET01";
constexpr std::size_t kHeader = 16;

const char* terminal_name(Terminal t) { return t == Terminal::kPool ? "pool" : "upsample"; }

Terminal parse_terminal(const std::string& s) {
  if (s == "pool") return Terminal::kPool;
  if (s == "upsample") return Terminal::kUpsample;
  throw FormatError("unknown block terminal '" + s + "'");
}

json spec_json(const NetworkSpec& spec) {
  json segs = json::array();
  for (const auto& seg : spec.segments) {
    json stages = json::array();
    for (const auto& st : seg.stages) {
      if (st.is_block()) {
        json convs = json::array();
        for (const auto& c : st.block.convs) {
          convs.push_back({c.in_channels, c.out_channels, c.kernel});
        }
        stages.push_back({{"kind", "block"},
                          {"index", st.block.index},
                          {"terminal", terminal_name(st.block.terminal)},
                          {"convs", convs}});
      } else {
        stages.push_back({{"kind", "coding"},
                          {"channels", st.coding.channels},
                          {"reduction", st.coding.reduction}});
      }
    }
    json s = {{"parent", seg.parent}, {"attach", seg.attach}, {"stages", stages}};
    if (seg.head) {
      s["head"] = {{"task", task_name(seg.head->task)},
                   {"in_channels", seg.head->in_channels},
                   {"out_channels", seg.head->out_channels},
                   {"bin_length", seg.head->bin_length}};
    } else {
      s["head"] = nullptr;
    }
    segs.push_back(s);
  }
  return {{"input_channels", spec.input_channels}, {"segments", segs}};
}

NetworkSpec spec_parse(const json& j) {
  NetworkSpec spec;
  spec.input_channels = j.at("input_channels").get<int>();
  for (const auto& s : j.at("segments")) {
    Segment seg;
    seg.parent = s.at("parent").get<int>();
    seg.attach = s.at("attach").get<int>();
    for (const auto& st : s.at("stages")) {
      const std::string kind = st.at("kind").get<std::string>();
      if (kind == "block") {
        BlockSpec b;
        b.index = st.at("index").get<int>();
        b.terminal = parse_terminal(st.at("terminal").get<std::string>());
        for (const auto& c : st.at("convs")) {
          b.convs.push_back({c.at(0).get<int>(), c.at(1).get<int>(), c.at(2).get<int>()});
        }
        seg.stages.push_back(Stage::of(std::move(b)));
      } else if (kind == "coding") {
        seg.stages.push_back(
            Stage::of(CodingSpec{st.at("channels").get<int>(), st.at("reduction").get<int>()}));
      } else {
        throw FormatError("unknown stage kind '" + kind + "'");
      }
    }
    const auto& h = s.at("head");
    if (!h.is_null()) {
      HeadSpec head;
      try {
        head.task = parse_task(h.at("task").get<std::string>());
      } catch (const UsageError& e) {
        throw FormatError(e.what());
      }
      head.in_channels = h.at("in_channels").get<int>();
      head.out_channels = h.at("out_channels").get<int>();
      head.bin_length = h.at("bin_length").get<double>();
      seg.head = head;
    }
    spec.segments.push_back(std::move(seg));
  }
  return spec;
}

json shape_json(const Shape& s) { return {s.n, s.c, s.h, s.w}; }

Shape shape_parse(const json& j) {
  return {j.at(0).get<int>(), j.at(1).get<int>(), j.at(2).get<int>(), j.at(3).get<int>()};
}

std::string encode(const char* magic, const json& manifest, const std::string& blob) {
  const std::string text = manifest.dump();
  std::string out(magic, 8);
  const std::uint64_t len = text.size();
  out.append(reinterpret_cast<const char*>(&len), sizeof(len));
  out += text;
  out += blob;
  return out;
}

struct Decoded {
  json manifest;
  std::string bytes;
  std::size_t blob_offset = 0;
};

Decoded decode(const std::filesystem::path& path, const char* magic) {
  Decoded d;
  d.bytes = read_file(path);
  const std::string where = path.string();
  if (d.bytes.size() < kHeader) {
    throw FormatError(where + ": truncated header at offset " + std::to_string(d.bytes.size()));
  }
  if (std::memcmp(d.bytes.data(), magic, 8) != 0) {
    throw FormatError(where + ": bad magic at offset 0 (expected " + std::string(magic, 8) + ")");
  }
  std::uint64_t len = 0;
  std::memcpy(&len, d.bytes.data() + 8, sizeof(len));
  if (len > d.bytes.size() - kHeader) {
    throw FormatError(where + ": manifest of " + std::to_string(len) +
                      " bytes runs past the end of the file at offset " +
                      std::to_string(d.bytes.size()));
  }
  try {
    d.manifest = json::parse(d.bytes.begin() + kHeader, d.bytes.begin() + kHeader + len);
  } catch (const json::exception& e) {
    throw FormatError(where + ": unreadable manifest at offset 16: " + e.what());
  }
  const int version = d.manifest.value("format_version", -1);
  if (version != kFormatVersion) {
    throw FormatError(where + ": format version " + std::to_string(version) +
                      ", this build reads version " + std::to_string(kFormatVersion));
  }
  d.blob_offset = kHeader + len;
  const std::uint64_t blob = d.manifest.value("blob_bytes", std::uint64_t{0});
  const std::size_t have = d.bytes.size() - d.blob_offset;
  if (have != blob) {
    throw FormatError(where + ": blob is " + std::to_string(have) + " bytes, manifest declares " +
                      std::to_string(blob) + " (blob starts at offset " +
                      std::to_string(d.blob_offset) + ")");
  }
  return d;
}

// Returns a pointer to a validated entry of the blob.
const char* entry(const Decoded& d, const json& e, const std::string& what,
                  std::uint64_t expected_bytes, const std::filesystem::path& path) {
  const std::uint64_t off = e.at("offset").get<std::uint64_t>();
  const std::uint64_t bytes = e.at("bytes").get<std::uint64_t>();
  const std::size_t blob = d.bytes.size() - d.blob_offset;
  if (bytes != expected_bytes) {
    throw FormatError(path.string() + ": " + what + " declares " + std::to_string(bytes) +
                      " bytes, its shape needs " + std::to_string(expected_bytes) +
                      " (offset " + std::to_string(d.blob_offset + off) + ")");
  }
  if (off > blob || bytes > blob - off) {
    throw FormatError(path.string() + ": " + what + " at offset " +
                      std::to_string(d.blob_offset + off) + " runs past the end of the blob");
  }
  const char* p = d.bytes.data() + d.blob_offset + off;
  const std::uint32_t crc = crc32_of(p, bytes);
  if (crc != e.at("crc32").get<std::uint32_t>()) {
    throw FormatError(path.string() + ": checksum mismatch in " + what + " (bytes " +
                      std::to_string(d.blob_offset + off) + ".." +
                      std::to_string(d.blob_offset + off + bytes) + ")");
  }
  return p;
}

template <typename T>
json append_blob(std::string& blob, const std::string& name, const T* data, std::size_t count) {
  const std::size_t bytes = count * sizeof(T);
  json e = {{"name", name},
            {"offset", blob.size()},
            {"bytes", bytes},
            {"crc32", crc32_of(data, bytes)}};
  blob.append(reinterpret_cast<const char*>(data), bytes);
  return e;
}

json scene_json(const SceneConfig& c) {
  return {{"height", c.height},         {"width", c.width},
          {"classes", c.classes},       {"min_primitives", c.min_primitives},
          {"max_primitives", c.max_primitives}, {"near", c.near},
          {"far", c.far},               {"noise", c.noise},
          {"pixel_size", c.intrinsics.pixel_size}, {"seed", c.seed}};
}

SceneConfig scene_parse(const json& j) {
  SceneConfig c;
  c.height = j.at("height").get<int>();
  c.width = j.at("width").get<int>();
  c.classes = j.at("classes").get<int>();
  c.min_primitives = j.at("min_primitives").get<int>();
  c.max_primitives = j.at("max_primitives").get<int>();
  c.near = j.at("near").get<double>();
  c.far = j.at("far").get<double>();
  c.noise = j.at("noise").get<double>();
  c.intrinsics.pixel_size = j.at("pixel_size").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

template <typename Fn>
auto guarded(const std::filesystem::path& path, Fn&& fn) {
  try {
    return fn();
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": malformed manifest: " + e.what());
  }
}

}  // namespace

std::uint32_t crc32_of(const void* data, std::size_t len) {
  uLong crc = crc32(0L, Z_NULL, 0);
  const auto* p = static_cast<const Bytef*>(data);
  while (len > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(len, 1u << 30));
    crc = crc32(crc, p, chunk);
    p += chunk;
    len -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string spec_to_json(const NetworkSpec& spec) { return spec_json(spec).dump(); }

NetworkSpec spec_from_json(const std::string& text) {
  try {
    NetworkSpec spec = spec_parse(json::parse(text));
    validate(spec);
    return spec;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed network spec: ") + e.what());
  }
}

void save_checkpoint(const std::filesystem::path& path, const Model& model) {
  check_state(model.spec, model.state);
  std::string blob;
  json params = json::array();
  for (const auto& [name, shape] : parameter_layout(model.spec)) {
    const Tensor& t = model.state.params.at(name);
    json e = append_blob(blob, name, t.ptr(), t.size());
    e["shape"] = shape_json(shape);
    params.push_back(e);
  }
  json manifest = {{"format_version", kFormatVersion},
                   {"kind", "checkpoint"},
                   {"spec", spec_json(model.spec)},
                   {"step", model.state.step},
                   {"params", params},
                   {"blob_bytes", blob.size()}};
  write_file_atomic(path, encode(kCheckpointMagic, manifest, blob));
}

Model load_checkpoint(const std::filesystem::path& path) {
  const Decoded d = decode(path, kCheckpointMagic);
  return guarded(path, [&] {
    Model m;
    m.spec = spec_parse(d.manifest.at("spec"));
    try {
      validate(m.spec);
    } catch (const ConfigError& e) {
      throw FormatError(path.string() + ": invalid network spec: " + e.what());
    }
    m.state.step = d.manifest.at("step").get<std::int64_t>();
    for (const auto& e : d.manifest.at("params")) {
      const std::string name = e.at("name").get<std::string>();
      const Shape shape = shape_parse(e.at("shape"));
      const char* p = entry(d, e, "parameter " + name, shape.numel() * sizeof(double), path);
      std::vector<double> values(shape.numel());
      std::memcpy(values.data(), p, values.size() * sizeof(double));
      m.state.params.emplace(name, Tensor(shape, std::move(values)));
    }
    try {
      check_state(m.spec, m.state);
    } catch (const ConfigError& e) {
      throw FormatError(path.string() + ": " + e.what());
    }
    return m;
  });
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::string blob;
  json e = append_blob(blob, "data", t.ptr(), t.size());
  e["shape"] = shape_json(t.shape());
  json manifest = {{"format_version", kFormatVersion},
                   {"kind", "tensor"},
                   {"tensor", e},
                   {"blob_bytes", blob.size()}};
  write_file_atomic(path, encode(kTensorMagic, manifest, blob));
}

Tensor load_tensor(const std::filesystem::path& path) {
  const Decoded d = decode(path, kTensorMagic);
  return guarded(path, [&] {
    const json& e = d.manifest.at("tensor");
    const Shape shape = shape_parse(e.at("shape"));
    const char* p = entry(d, e, "tensor data", shape.numel() * sizeof(double), path);
    std::vector<double> values(shape.numel());
    std::memcpy(values.data(), p, values.size() * sizeof(double));
    return Tensor(shape, std::move(values));
  });
}

void save_dataset(const std::filesystem::path& path, const DatasetShard& shard) {
  const int H = shard.scene.height, W = shard.scene.width;
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  const std::size_t n = shard.samples.size();
  std::vector<double> image, depth, normal;
  std::vector<std::uint16_t> labels, instance;
  std::vector<std::uint8_t> mask;
  image.reserve(n * 3 * plane);
  for (const auto& s : shard.samples) {
    if (s.height != H || s.width != W) throw DimensionError("sample size differs from the shard");
    image.insert(image.end(), s.image.begin(), s.image.end());
    labels.insert(labels.end(), s.seg.begin(), s.seg.end());
    depth.insert(depth.end(), s.depth.begin(), s.depth.end());
    normal.insert(normal.end(), s.normal.begin(), s.normal.end());
    mask.insert(mask.end(), s.mask.begin(), s.mask.end());
    instance.insert(instance.end(), s.instance.begin(), s.instance.end());
  }
  std::string blob;
  json fields = json::array();
  auto add = [&](const char* name, const char* dtype, const auto& v) {
    json e = append_blob(blob, name, v.data(), v.size());
    e["dtype"] = dtype;
    fields.push_back(e);
  };
  add("image", "f64", image);
  add("labels", "u16", labels);
  add("depth", "f64", depth);
  add("normal", "f64", normal);
  add("mask", "u8", mask);
  add("instance", "u16", instance);
  json manifest = {{"format_version", kFormatVersion},
                   {"kind", "dataset"},
                   {"scene", scene_json(shard.scene)},
                   {"first_index", shard.first_index},
                   {"count", n},
                   {"fields", fields},
                   {"blob_bytes", blob.size()}};
  write_file_atomic(path, encode(kDatasetMagic, manifest, blob));
}

DatasetShard load_dataset(const std::filesystem::path& path) {
  const Decoded d = decode(path, kDatasetMagic);
  return guarded(path, [&] {
    DatasetShard shard;
    shard.scene = scene_parse(d.manifest.at("scene"));
    shard.first_index = d.manifest.at("first_index").get<std::int64_t>();
    const std::size_t n = d.manifest.at("count").get<std::size_t>();
    const std::size_t plane = static_cast<std::size_t>(shard.scene.height) * shard.scene.width;
    std::map<std::string, const json*> fields;
    for (const auto& e : d.manifest.at("fields")) fields[e.at("name").get<std::string>()] = &e;
    auto field = [&](const char* name, std::size_t elems, std::size_t elem_size) {
      auto it = fields.find(name);
      if (it == fields.end()) throw FormatError(path.string() + ": missing field " + name);
      return entry(d, *it->second, std::string("field ") + name, elems * elem_size, path);
    };
    const char* image = field("image", n * 3 * plane, 8);
    const char* labels = field("labels", n * plane, 2);
    const char* depth = field("depth", n * plane, 8);
    const char* normal = field("normal", n * 3 * plane, 8);
    const char* mask = field("mask", n * plane, 1);
    const char* instance = field("instance", n * plane, 2);
    for (std::size_t i = 0; i < n; ++i) {
      Sample s;
      s.height = shard.scene.height;
      s.width = shard.scene.width;
      auto take = [&](auto& dst, const char* src, std::size_t elems) {
        dst.resize(elems);
        std::memcpy(dst.data(), src + i * elems * sizeof(dst[0]), elems * sizeof(dst[0]));
      };
      take(s.image, image, 3 * plane);
      take(s.seg, labels, plane);
      take(s.depth, depth, plane);
      take(s.normal, normal, 3 * plane);
      take(s.mask, mask, plane);
      take(s.instance, instance, plane);
      shard.samples.push_back(std::move(s));
    }
    return shard;
  });
}

}  // namespace amalgam
