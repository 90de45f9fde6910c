#pragma once

// Single-file parameter archive.
//
//   uieforge-ckpt-v1
//   entries <count>
//   <name> <dtype> <rank> <d0> ... <offset> <nbytes>     (one line per entry)
//   end
//   <raw little-endian element bytes>
//
// Offsets are relative to the first byte after the "end" line. Supported
// dtypes: f32, f64, u8 (u8 entries carry text blobs such as configs).

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "uieforge/nn.hpp"
#include "uieforge/tensor.hpp"

namespace uieforge {

inline constexpr const char* kCheckpointTag = "uieforge-ckpt-v1";

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

class Archive {
 public:
  struct Entry {
    std::string dtype;
    Shape shape;
    std::vector<char> bytes;
  };

  template <class T>
  void put(const std::string& name, const Tensor<T>& t) {
    check_name(name);
    Entry e{dtype_of<T>(), t.shape(), std::vector<char>(t.size() * sizeof(T))};
    std::memcpy(e.bytes.data(), t.data(), e.bytes.size());
    entries_[name] = std::move(e);
  }

  void put_text(const std::string& name, const std::string& text) {
    check_name(name);
    Entry e{"u8", {std::max<std::size_t>(text.size(), 1)}, std::vector<char>(text.begin(), text.end())};
    if (text.empty()) e.bytes.push_back('\0');
    entries_[name] = std::move(e);
  }

  template <class T>
  void put_params(const std::string& prefix, const ParamStore<T>& store) {
    for (const auto& [k, v] : store) put(prefix + k, v);
  }

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }

  // Reads an entry, converting between f32 and f64 as needed.
  template <class T>
  Tensor<T> get(const std::string& name) const {
    const auto& e = entry(name);
    Tensor<T> out(e.shape);
    if (e.dtype == "f32") {
      std::vector<float> buf(out.size());
      std::memcpy(buf.data(), e.bytes.data(), e.bytes.size());
      for (std::size_t i = 0; i < buf.size(); ++i) out[i] = T(buf[i]);
    } else if (e.dtype == "f64") {
      std::vector<double> buf(out.size());
      std::memcpy(buf.data(), e.bytes.data(), e.bytes.size());
      for (std::size_t i = 0; i < buf.size(); ++i) out[i] = T(buf[i]);
    } else {
      throw CheckpointError("entry '" + name + "' has dtype " + e.dtype + ", expected f32/f64");
    }
    return out;
  }

  std::string get_text(const std::string& name) const {
    const auto& e = entry(name);
    if (e.dtype != "u8") throw CheckpointError("entry '" + name + "' is not text");
    std::string s(e.bytes.begin(), e.bytes.end());
    if (s == std::string(1, '\0')) s.clear();
    return s;
  }

  // Loads every entry under `prefix` into `store`; each stored parameter must be present
  // with a matching shape.
  template <class T>
  void get_params(const std::string& prefix, ParamStore<T>& store) const {
    for (auto& [k, v] : store) {
      const std::string name = prefix + k;
      if (!contains(name)) throw CheckpointError("missing parameter '" + name + "'");
      auto t = get<T>(name);
      if (t.shape() != v.shape())
        throw CheckpointError("parameter '" + name + "' has shape " + to_string(t.shape()) +
                              ", model expects " + to_string(v.shape()));
      v = std::move(t);
    }
  }

  std::vector<std::string> names() const {
    std::vector<std::string> n;
    for (const auto& [k, _] : entries_) n.push_back(k);
    return n;
  }

  void save(const std::filesystem::path& path) const {
    std::ostringstream manifest;
    manifest << kCheckpointTag << '\n' << "entries " << entries_.size() << '\n';
    std::uint64_t offset = 0;
    for (const auto& [name, e] : entries_) {
      manifest << name << ' ' << e.dtype << ' ' << e.shape.size();
      for (auto d : e.shape) manifest << ' ' << d;
      manifest << ' ' << offset << ' ' << e.bytes.size() << '\n';
      offset += e.bytes.size();
    }
    manifest << "end\n";
    const auto tmp = path.string() + ".tmp";
    {
      std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
      if (!os) throw CheckpointError("cannot write " + tmp);
      const auto m = manifest.str();
      os.write(m.data(), std::streamsize(m.size()));
      for (const auto& [_, e] : entries_) os.write(e.bytes.data(), std::streamsize(e.bytes.size()));
      if (!os) throw CheckpointError("write failed: " + tmp);
    }
    std::filesystem::rename(tmp, path);
  }

  static Archive load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
    std::string line;
    if (!std::getline(is, line) || line != kCheckpointTag)
      throw CheckpointError(path.string() + ": bad manifest header (expected " + kCheckpointTag + ")");
    std::size_t count = 0;
    {
      if (!std::getline(is, line)) throw CheckpointError(path.string() + ": truncated manifest");
      std::istringstream ls(line);
      std::string kw;
      if (!(ls >> kw >> count) || kw != "entries")
        throw CheckpointError(path.string() + ": malformed entry count line '" + line + "'");
    }
    struct Pending {
      std::string name;
      Entry e;
      std::uint64_t offset, nbytes;
    };
    std::vector<Pending> pending;
    for (std::size_t i = 0; i < count; ++i) {
      if (!std::getline(is, line)) throw CheckpointError(path.string() + ": truncated manifest");
      std::istringstream ls(line);
      Pending p;
      std::size_t rank = 0;
      if (!(ls >> p.name >> p.e.dtype >> rank))
        throw CheckpointError(path.string() + ": malformed manifest line '" + line + "'");
      p.e.shape.resize(rank);
      for (auto& d : p.e.shape)
        if (!(ls >> d) || d == 0) throw CheckpointError(path.string() + ": bad shape in '" + line + "'");
      if (!(ls >> p.offset >> p.nbytes))
        throw CheckpointError(path.string() + ": malformed manifest line '" + line + "'");
      const std::size_t elem = p.e.dtype == "f32" ? 4 : p.e.dtype == "f64" ? 8 : p.e.dtype == "u8" ? 1 : 0;
      if (elem == 0) throw CheckpointError(path.string() + ": unknown dtype in '" + line + "'");
      if (numel(p.e.shape) * elem != p.nbytes)
        throw CheckpointError(path.string() + ": byte count does not match shape in '" + line + "'");
      pending.push_back(std::move(p));
    }
    if (!std::getline(is, line) || line != "end")
      throw CheckpointError(path.string() + ": manifest not terminated by 'end'");
    const auto data_start = is.tellg();
    is.seekg(0, std::ios::end);
    const auto data_size = std::uint64_t(is.tellg() - data_start);
    Archive a;
    for (auto& p : pending) {
      if (p.offset + p.nbytes > data_size)
        throw CheckpointError(path.string() + ": entry '" + p.name + "' extends past end of file");
      p.e.bytes.resize(p.nbytes);
      is.seekg(data_start + std::streamoff(p.offset));
      is.read(p.e.bytes.data(), std::streamsize(p.nbytes));
      if (!is) throw CheckpointError(path.string() + ": read failed for '" + p.name + "'");
      a.entries_[p.name] = std::move(p.e);
    }
    return a;
  }

 private:
  template <class T>
  static std::string dtype_of() {
    if constexpr (std::is_same_v<T, float>)
      return "f32";
    else if constexpr (std::is_same_v<T, double>)
      return "f64";
    else
      static_assert(sizeof(T) == 0, "unsupported checkpoint dtype");
  }

  static void check_name(const std::string& name) {
    if (name.empty() || name.find_first_of(" \t\n\r") != std::string::npos)
      throw CheckpointError("invalid entry name '" + name + "'");
  }

  const Entry& entry(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw CheckpointError("missing entry '" + name + "'");
    return it->second;
  }

  std::map<std::string, Entry> entries_;
};

}  // namespace uieforge
