#pragma once

// Named parameter map plus an on-disk checkpoint format: a JSON header
// (names, shapes, byte offsets, step counter, config echo) followed by the
// raw little-endian float64 payload. Optimizer moments ride along as a
// second parameter map.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "gma/tensor.hpp"

namespace gma {

class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor t) {
    if (index_.count(name)) throw ContractError("duplicate parameter name: " + name);
    index_[name] = items_.size();
    items_.emplace_back(name, std::move(t));
    return items_.back().second;
  }
  bool has(const std::string& name) const { return index_.count(name) > 0; }
  Tensor& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter: " + name);
    return items_[it->second].second;
  }
  const Tensor& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter: " + name);
    return items_[it->second].second;
  }
  const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
  size_t size() const { return items_.size(); }
  bool empty() const { return items_.empty(); }

  size_t scalar_count() const {
    size_t n = 0;
    for (const auto& [name, t] : items_) n += t.size();
    return n;
  }
  void zero_grad_all() {
    for (auto& [name, t] : items_) t.zero_grad();
  }

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
  std::unordered_map<std::string, size_t> index_;
};

struct Checkpoint {
  nlohmann::json config;  // model/train config echo, opaque to this layer
  int64_t step = 0;
  ParamStore params;
  ParamStore opt_state;
};

namespace detail {

constexpr char kMagic[8] = {'g', 'm', 'a', 'c', 'k', 'p', 't', '1'};

inline void write_doubles(std::ofstream& out, std::span<const double> v) {
  static_assert(sizeof(double) == 8);
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(v.data()), std::streamsize(v.size() * 8));
  } else {
    for (double d : v) {
      uint64_t bits;
      std::memcpy(&bits, &d, 8);
      char b[8];
      for (int i = 0; i < 8; ++i) b[i] = char(bits >> (8 * i));
      out.write(b, 8);
    }
  }
}

inline void read_doubles(std::ifstream& in, std::vector<double>& v) {
  if constexpr (std::endian::native == std::endian::little) {
    in.read(reinterpret_cast<char*>(v.data()), std::streamsize(v.size() * 8));
  } else {
    for (double& d : v) {
      char b[8];
      in.read(b, 8);
      uint64_t bits = 0;
      for (int i = 0; i < 8; ++i) bits |= uint64_t(uint8_t(b[i])) << (8 * i);
      std::memcpy(&d, &bits, 8);
    }
  }
  if (!in) throw ContractError("checkpoint payload truncated");
}

inline void check_finite(const std::string& name, const Tensor& t) {
  for (double d : t.data())
    if (!std::isfinite(d)) throw ContractError("non-finite values in parameter " + name);
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  nlohmann::json header;
  header["format"] = "gma-checkpoint";
  header["version"] = 1;
  header["step"] = ckpt.step;
  header["config"] = ckpt.config;

  uint64_t offset = 0;
  auto describe = [&](const ParamStore& store) {
    nlohmann::json list = nlohmann::json::array();
    for (const auto& [name, t] : store.items()) {
      detail::check_finite(name, t);
      list.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
      offset += t.size() * 8;
    }
    return list;
  };
  header["params"] = describe(ckpt.params);
  header["opt_state"] = describe(ckpt.opt_state);

  std::ofstream out(path, std::ios::binary);
  if (!out) throw ContractError("cannot write checkpoint: " + path);
  std::string htext = header.dump();
  uint64_t hlen = htext.size();
  out.write(detail::kMagic, 8);
  char lenb[8];
  for (int i = 0; i < 8; ++i) lenb[i] = char(hlen >> (8 * i));
  out.write(lenb, 8);
  out.write(htext.data(), std::streamsize(htext.size()));
  for (const auto& [name, t] : ckpt.params.items()) detail::write_doubles(out, t.data());
  for (const auto& [name, t] : ckpt.opt_state.items()) detail::write_doubles(out, t.data());
  if (!out) throw ContractError("checkpoint write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ContractError("cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, detail::kMagic, 8) != 0)
    throw ContractError("not a checkpoint file: " + path);
  char lenb[8];
  in.read(lenb, 8);
  uint64_t hlen = 0;
  for (int i = 0; i < 8; ++i) hlen |= uint64_t(uint8_t(lenb[i])) << (8 * i);
  std::string htext(hlen, '\0');
  in.read(htext.data(), std::streamsize(hlen));
  if (!in) throw ContractError("checkpoint header truncated: " + path);

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(htext);
  } catch (const nlohmann::json::exception& e) {
    throw ContractError(std::string("bad checkpoint header: ") + e.what());
  }
  if (header.value("format", "") != "gma-checkpoint")
    throw ContractError("not a checkpoint file: " + path);

  Checkpoint ckpt;
  ckpt.step = header.at("step").get<int64_t>();
  ckpt.config = header.value("config", nlohmann::json::object());
  auto restore = [&](const nlohmann::json& list, ParamStore& store, bool grad) {
    for (const auto& entry : list) {
      Shape shape = entry.at("shape").get<Shape>();
      std::vector<double> buf(numel(shape));
      detail::read_doubles(in, buf);
      std::string name = entry.at("name").get<std::string>();
      Tensor t = Tensor::from(shape, std::move(buf), grad);
      detail::check_finite(name, t);
      store.add(name, std::move(t));
    }
  };
  restore(header.at("params"), ckpt.params, true);
  restore(header.at("opt_state"), ckpt.opt_state, false);
  return ckpt;
}

}  // namespace gma
