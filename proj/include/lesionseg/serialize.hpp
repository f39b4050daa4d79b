#pragma once

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "lesionseg/model.hpp"
#include "lesionseg/patches.hpp"

namespace lesionseg {

static_assert(std::endian::native == std::endian::little,
              "containers store raw little-endian float payloads");

namespace detail {

inline std::uint32_t crc32_of(const std::string& bytes) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()),
              static_cast<uInt>(bytes.size())));
}

inline std::string crc32_hex(std::uint32_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(8) << std::setfill('0') << v;
  return os.str();
}

inline std::map<std::string, std::string> parse_kv(std::istringstream& line) {
  std::map<std::string, std::string> kv;
  std::string tok;
  while (line >> tok) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos) continue;
    kv[tok.substr(0, eq)] = tok.substr(eq + 1);
  }
  return kv;
}

inline std::unique_ptr<Layer<float>> layer_from_spec(const std::string& kind,
                                                     std::istringstream& rest,
                                                     Group group) {
  auto kv = parse_kv(rest);
  if (kind == "conv3d") {
    return std::make_unique<Conv3dLayer<float>>(std::stoul(kv.at("in")),
                                                std::stoul(kv.at("out")), group);
  }
  if (kind == "batchnorm") {
    return std::make_unique<BatchNormLayer<float>>(std::stoul(kv.at("channels")), group);
  }
  if (kind == "prelu") {
    Shape shape;
    std::istringstream dims(kv.at("shape"));
    std::string part;
    while (std::getline(dims, part, 'x')) shape.push_back(std::stoul(part));
    return std::make_unique<PreluLayer<float>>(shape, group);
  }
  if (kind == "maxpool") return std::make_unique<MaxPoolLayer<float>>(group);
  if (kind == "flatten") return std::make_unique<FlattenLayer<float>>(group);
  if (kind == "dense") {
    return std::make_unique<DenseLayer<float>>(std::stoul(kv.at("in")),
                                               std::stoul(kv.at("out")), group);
  }
  if (kind == "dropout") {
    return std::make_unique<DropoutLayer<float>>(std::stod(kv.at("p")), group);
  }
  if (kind == "softmax") return std::make_unique<SoftmaxLayer<float>>(group);
  throw std::runtime_error("model container: unknown layer kind '" + kind + "'");
}

inline Group group_from_name(const std::string& s) {
  if (s == "CONV") return Group::conv;
  if (s == "FC1") return Group::fc1;
  if (s == "FC2") return Group::fc2;
  if (s == "FC3") return Group::fc3;
  if (s == "OUT") return Group::out;
  throw std::runtime_error("model container: unknown group '" + s + "'");
}

}  // namespace detail

inline constexpr const char* kModelMagic = "lesionseg-model v1";

/// Container layout: a plain-text header (layer specs, group tags,
/// trainability flags, seed, tensor table), the raw little-endian float32
/// tensor payload in declaration order, and a trailing crc32 of the payload.
inline std::string serialize_model(Model& model) {
  std::ostringstream header;
  header << kModelMagic << "\n";
  header << "seed " << model.seed << "\n";
  header << "layers " << model.layers.size() << "\n";
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const auto& l = *model.layers[i];
    header << "layer " << i << " group " << group_name(l.group()) << " trainable "
           << (l.trainable() ? 1 : 0) << " " << l.spec_line() << "\n";
  }
  auto params = model.params();
  header << "tensors " << params.size() << "\n";
  std::string payload;
  for (auto& p : params) {
    header << "tensor " << p.name << " " << p.value->rank();
    for (std::size_t a = 0; a < p.value->rank(); ++a) header << " " << p.value->extent(a);
    header << "\n";
    const char* bytes = reinterpret_cast<const char*>(p.value->data());
    payload.append(bytes, sizeof(float) * p.value->size());
  }
  header << "payload_bytes " << payload.size() << "\n";
  header << "end-header\n";

  std::string out = header.str();
  out += payload;
  out += "crc32 " + detail::crc32_hex(detail::crc32_of(payload)) + "\n";
  return out;
}

inline Model parse_model(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kModelMagic) {
    throw std::runtime_error("incompatible model container version (expected '" +
                             std::string(kModelMagic) + "')");
  }
  Model model;
  std::size_t n_layers = 0, n_tensors = 0, payload_bytes = 0;
  std::vector<std::pair<std::string, Shape>> tensor_table;
  while (std::getline(in, line)) {
    if (line == "end-header") break;
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "seed") {
      ls >> model.seed;
    } else if (key == "layers") {
      ls >> n_layers;
    } else if (key == "layer") {
      std::size_t idx;
      std::string kw_group, group, kw_train, kind;
      int trainable;
      ls >> idx >> kw_group >> group >> kw_train >> trainable >> kind;
      auto layer = detail::layer_from_spec(kind, ls, detail::group_from_name(group));
      layer->set_trainable(trainable != 0);
      // a frozen batch-norm layer also pins its running statistics
      if (auto* bn = dynamic_cast<BatchNormLayer<float>*>(layer.get())) {
        bn->set_stats_frozen(trainable == 0);
      }
      model.layers.push_back(std::move(layer));
    } else if (key == "tensors") {
      ls >> n_tensors;
    } else if (key == "tensor") {
      std::string name;
      std::size_t rank;
      ls >> name >> rank;
      Shape shape(rank);
      for (auto& e : shape) ls >> e;
      tensor_table.emplace_back(name, shape);
    } else if (key == "payload_bytes") {
      ls >> payload_bytes;
    } else {
      throw std::runtime_error("model container: unexpected header line '" + line + "'");
    }
  }
  if (model.layers.size() != n_layers) {
    throw std::runtime_error("model container: layer count mismatch");
  }
  auto params = model.params();
  if (params.size() != n_tensors || params.size() != tensor_table.size()) {
    throw std::runtime_error("model container: tensor count mismatch");
  }
  std::string payload(payload_bytes, '\0');
  in.read(payload.data(), static_cast<std::streamsize>(payload_bytes));
  if (in.gcount() != static_cast<std::streamsize>(payload_bytes)) {
    throw std::runtime_error("model container: truncated payload");
  }
  std::string crc_line;
  std::getline(in, crc_line);
  const std::string expect = "crc32 " + detail::crc32_hex(detail::crc32_of(payload));
  if (crc_line != expect) {
    throw std::runtime_error("model container: payload checksum mismatch");
  }
  std::size_t off = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].name != tensor_table[i].first ||
        params[i].value->shape() != tensor_table[i].second) {
      throw std::runtime_error("model container: tensor table does not match layers");
    }
    const std::size_t bytes = sizeof(float) * params[i].value->size();
    if (off + bytes > payload.size()) {
      throw std::runtime_error("model container: truncated payload");
    }
    std::memcpy(params[i].value->data(), payload.data() + off, bytes);
    off += bytes;
  }
  return model;
}

inline void save_model(Model& model, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write model file: " + path);
  const std::string bytes = serialize_model(model);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("failed writing model file: " + path);
}

inline Model load_model(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open model file: " + path);
  return parse_model(f);
}

inline constexpr const char* kDatasetMagic = "lesionseg-dataset v1";

/// Optional patch-dataset cache: text header (labels, provenance, split,
/// pools, seed) + raw float32 patch payload + trailing crc32.
inline void save_dataset(const PatchDataset& ds, const std::string& path) {
  std::ostringstream header;
  header << kDatasetMagic << "\n";
  header << "seed " << ds.seed << "\n";
  header << "count " << ds.size() << "\n";
  header << "split " << (ds.has_split ? 1 : 0) << "\n";
  header << "cases " << ds.case_ids.size();
  for (const auto& id : ds.case_ids) header << " " << id;
  header << "\n";
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& p = ds.provenance[i];
    header << "patch " << i << " label " << ds.labels[i] << " case " << p.case_index
           << " center " << p.center.z << " " << p.center.y << " " << p.center.x
           << " source " << patch_source_name(p.source) << " val "
           << int(ds.is_validation[i]) << "\n";
  }
  auto dump_pool = [&](const char* name, const std::vector<NegativePoolEntry>& pool) {
    header << name << " " << pool.size() << "\n";
    for (const auto& e : pool) {
      header << "entry " << e.case_index << " " << e.center.z << " " << e.center.y
             << " " << e.center.x << "\n";
    }
  };
  dump_pool("primary_pool", ds.primary_negative_pool);
  dump_pool("fallback_pool", ds.fallback_negative_pool);
  std::string payload(reinterpret_cast<const char*>(ds.patches.data()),
                      sizeof(float) * ds.patches.size());
  header << "payload_bytes " << payload.size() << "\n";
  header << "end-header\n";

  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write dataset file: " + path);
  f << header.str();
  f.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  f << "crc32 " << detail::crc32_hex(detail::crc32_of(payload)) << "\n";
  if (!f) throw std::runtime_error("failed writing dataset file: " + path);
}

inline PatchDataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open dataset file: " + path);
  std::string line;
  if (!std::getline(in, line) || line != kDatasetMagic) {
    throw std::runtime_error("incompatible dataset container version");
  }
  PatchDataset ds;
  std::size_t count = 0, payload_bytes = 0;
  std::vector<NegativePoolEntry>* pool = nullptr;
  while (std::getline(in, line)) {
    if (line == "end-header") break;
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "seed") {
      ls >> ds.seed;
    } else if (key == "count") {
      ls >> count;
      ds.labels.assign(count, 0);
      ds.provenance.resize(count);
      ds.is_validation.assign(count, 0);
    } else if (key == "split") {
      int s;
      ls >> s;
      ds.has_split = s != 0;
    } else if (key == "cases") {
      std::size_t k;
      ls >> k;
      std::string id;
      while (ls >> id) ds.case_ids.push_back(id);
      if (ds.case_ids.size() != k) {
        throw std::runtime_error("dataset container: case list count mismatch");
      }
    } else if (key == "patch") {
      std::size_t i;
      std::string kw, source;
      int label, val;
      PatchProvenance p;
      ls >> i >> kw >> label >> kw >> p.case_index >> kw >> p.center.z >> p.center.y >>
          p.center.x >> kw >> source >> kw >> val;
      ds.labels.at(i) = label;
      if (source == "lesion") p.source = PatchSource::lesion;
      else if (source == "fp-negative") p.source = PatchSource::fp_negative;
      else p.source = PatchSource::random_negative;
      p.case_id = p.case_index < ds.case_ids.size() ? ds.case_ids[p.case_index] : "";
      ds.provenance.at(i) = p;
      ds.is_validation.at(i) = static_cast<char>(val);
    } else if (key == "primary_pool") {
      pool = &ds.primary_negative_pool;
      std::size_t k;
      ls >> k;
      pool->reserve(k);
    } else if (key == "fallback_pool") {
      pool = &ds.fallback_negative_pool;
      std::size_t k;
      ls >> k;
      pool->reserve(k);
    } else if (key == "entry") {
      NegativePoolEntry e;
      ls >> e.case_index >> e.center.z >> e.center.y >> e.center.x;
      if (!pool) throw std::runtime_error("dataset container: entry before pool header");
      pool->push_back(e);
    } else if (key == "payload_bytes") {
      ls >> payload_bytes;
    } else {
      throw std::runtime_error("dataset container: unexpected header line '" + line + "'");
    }
  }
  std::string payload(payload_bytes, '\0');
  in.read(payload.data(), static_cast<std::streamsize>(payload_bytes));
  if (in.gcount() != static_cast<std::streamsize>(payload_bytes)) {
    throw std::runtime_error("dataset container: truncated payload");
  }
  std::string crc_line;
  std::getline(in, crc_line);
  if (crc_line != "crc32 " + detail::crc32_hex(detail::crc32_of(payload))) {
    throw std::runtime_error("dataset container: payload checksum mismatch");
  }
  if (payload_bytes != count * 2 * kPatchEdge * kPatchEdge * kPatchEdge * sizeof(float)) {
    throw std::runtime_error("dataset container: payload size mismatch");
  }
  if (count > 0) {
    ds.patches = Tensor<float>({count, 2, kPatchEdge, kPatchEdge, kPatchEdge});
    std::memcpy(ds.patches.data(), payload.data(), payload.size());
  }
  return ds;
}

}  // namespace lesionseg
