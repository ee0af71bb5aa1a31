// Copyright 2026 The lipmem Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// LRLC1 tensor container.
//
//   magic "LRLC1" | u32 version | u64 config_hash | str mode | str meta
//   u64 count | count x (str name | u32 rank | rank x u64 dim | f32 data...)
//
// Strings are u64 length + bytes. All integers and floats little-endian.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "lipmem/errors.hpp"
#include "lipmem/numcore.hpp"
#include "lipmem/optim.hpp"
#include "lipmem/synthlang.hpp"
#include "lipmem/units.hpp"

namespace lipmem {

inline constexpr char kContainerMagic[5] = {'L', 'R', 'L', 'C', '1'};
inline constexpr std::uint32_t kContainerVersion = 1;

struct Checkpoint {
  std::uint64_t config_hash = 0;
  std::string mode;
  std::string meta;  // free-form JSON
  ParamList tensors;

  const Tensor* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t.tensor;
    return nullptr;
  }
  const Tensor& at(const std::string& name) const {
    const Tensor* t = find(name);
    if (!t) throw DataError("checkpoint: no tensor named '" + name + "'");
    return *t;
  }
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "container IO assumes a little-endian host");

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

inline void put_str(std::string& out, const std::string& s) {
  put<std::uint64_t>(out, s.size());
  out += s;
}

struct Reader {
  const std::string& buf;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (pos + n > buf.size()) throw DataError("container: truncated at byte " + std::to_string(pos));
  }
  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, buf.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
  }
  std::string get_str() {
    const auto n = get<std::uint64_t>();
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

}  // namespace detail

inline std::string serialize(const Checkpoint& ck) {
  std::string out(kContainerMagic, sizeof(kContainerMagic));
  detail::put<std::uint32_t>(out, kContainerVersion);
  detail::put<std::uint64_t>(out, ck.config_hash);
  detail::put_str(out, ck.mode);
  detail::put_str(out, ck.meta);
  detail::put<std::uint64_t>(out, ck.tensors.size());
  std::set<std::string> names;
  for (const auto& [name, t] : ck.tensors) {
    if (!names.insert(name).second) throw ContractError("container: duplicate tensor name '" + name + "'");
    detail::put_str(out, name);
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) detail::put<std::uint64_t>(out, d);
    for (double v : t.data()) detail::put<float>(out, static_cast<float>(v));
  }
  return out;
}

inline Checkpoint deserialize(const std::string& bytes) {
  detail::Reader r{bytes};
  r.need(sizeof(kContainerMagic));
  if (std::memcmp(bytes.data(), kContainerMagic, sizeof(kContainerMagic)) != 0) {
    throw DataError("container: bad magic");
  }
  r.pos = sizeof(kContainerMagic);
  const auto version = r.get<std::uint32_t>();
  if (version != kContainerVersion) throw DataError("container: unsupported version " + std::to_string(version));
  Checkpoint ck;
  ck.config_hash = r.get<std::uint64_t>();
  ck.mode = r.get_str();
  ck.meta = r.get_str();
  const auto count = r.get<std::uint64_t>();
  std::set<std::string> names;
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = r.get_str();
    if (!names.insert(name).second) throw DataError("container: duplicate tensor name '" + name + "'");
    const auto rank = r.get<std::uint32_t>();
    Shape shape(rank);
    for (auto& d : shape) d = r.get<std::uint64_t>();
    Tensor t(shape);
    r.need(t.numel() * sizeof(float));
    for (auto& v : t.data()) v = static_cast<double>(r.get<float>());
    ck.tensors.push_back({std::move(name), std::move(t)});
  }
  if (r.pos != bytes.size()) throw DataError("container: trailing bytes");
  return ck;
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write " + path.string());
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw DataError("write failed: " + path.string());
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot read " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  write_file(path, serialize(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) { return deserialize(read_file(path)); }

/// Rounds every value through float32, the precision a checkpoint stores.
inline void round_to_stored(ParamList& params) {
  for (auto& p : params)
    for (auto& v : p.tensor.data()) v = static_cast<double>(static_cast<float>(v));
}

inline NamedTensor codebook_tensor(const UnitCodebook& cb) {
  return {"codebook/centroids", Tensor(Shape{cb.size, cb.feature_dim}, cb.centroids)};
}

inline UnitCodebook codebook_from(const Checkpoint& ck) {
  const Tensor& t = ck.at("codebook/centroids");
  if (t.rank() != 2) throw DataError("codebook/centroids must be rank 2");
  UnitCodebook cb;
  cb.size = t.dim(0);
  cb.feature_dim = t.dim(1);
  cb.centroids = t.values();
  cb.source_tag = ck.mode.empty() ? "mfcc-like" : ck.mode;
  return cb;
}

/// Corpus on disk: `<stem>.tsv` manifest (id, lang, text, T, T_a) and
/// `<stem>.lrlc` holding feat/{id}/audio, feat/{id}/video, feat/{id}/phonemes.
inline void save_corpus(const std::filesystem::path& stem, std::span<const Utterance> corpus,
                        std::size_t audio_dim, std::size_t video_dim) {
  std::string manifest;
  Checkpoint ck;
  ck.mode = "corpus";
  for (const auto& u : corpus) {
    manifest += u.id + '\t' + u.lang + '\t' + u.text + '\t' + std::to_string(u.frames) + '\t' +
                std::to_string(u.audio_frames()) + '\n';
    ck.tensors.push_back({"feat/" + u.id + "/audio", Tensor(Shape{u.frames, audio_dim}, u.audio)});
    ck.tensors.push_back({"feat/" + u.id + "/video", Tensor(Shape{u.frames, video_dim}, u.video)});
    std::vector<double> ph(u.phoneme_labels.begin(), u.phoneme_labels.end());
    ck.tensors.push_back({"feat/" + u.id + "/phonemes", Tensor(Shape{u.frames}, ph)});
  }
  auto tsv = stem;
  tsv += ".tsv";
  auto bin = stem;
  bin += ".lrlc";
  write_file(tsv, manifest);
  save_checkpoint(bin, ck);
}

inline std::vector<Utterance> load_corpus(const std::filesystem::path& stem) {
  auto tsv = stem;
  tsv += ".tsv";
  auto bin = stem;
  bin += ".lrlc";
  const std::string manifest = read_file(tsv);
  const Checkpoint ck = load_checkpoint(bin);
  std::vector<Utterance> out;
  std::istringstream in(manifest);
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::size_t start = 0;
    for (std::size_t tab; (tab = line.find('\t', start)) != std::string::npos; start = tab + 1)
      cols.push_back(line.substr(start, tab - start));
    cols.push_back(line.substr(start));
    if (cols.size() != 5) throw DataError(tsv.string() + ":" + std::to_string(line_no) + ": expected 5 columns");
    Utterance u;
    u.id = cols[0];
    u.lang = cols[1];
    u.text = cols[2];
    try {
      u.frames = std::stoul(cols[3]);
      if (std::stoul(cols[4]) != u.frames) throw DataError("T and T_a differ");
    } catch (const std::logic_error&) {
      throw DataError(tsv.string() + ":" + std::to_string(line_no) + ": bad frame count");
    }
    const Tensor& a = ck.at("feat/" + u.id + "/audio");
    const Tensor& v = ck.at("feat/" + u.id + "/video");
    const Tensor& p = ck.at("feat/" + u.id + "/phonemes");
    if (a.dim(0) != u.frames || v.dim(0) != u.frames || p.numel() != u.frames) {
      throw DataError("corpus: feature lengths of " + u.id + " disagree with the manifest");
    }
    u.audio = a.values();
    u.video = v.values();
    for (double x : p.data()) u.phoneme_labels.push_back(static_cast<int>(x));
    out.push_back(std::move(u));
  }
  return out;
}

}  // namespace lipmem
