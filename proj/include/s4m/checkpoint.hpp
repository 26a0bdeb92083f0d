#pragma once

// Checkpoint archive: "s4m-ckpt-v1" tag, a JSON header (model config, vocab,
// knowledge lists, strip flag), then named float64 tensors. Tensors always
// serialize as float64 so float and double builds read each other's files.

#include <cstring>
#include <fstream>
#include <sstream>
#include <string>

#include "s4m/model.hpp"

namespace s4m {

constexpr const char* kCkptTag = "s4m-ckpt-v1";

namespace detail {

inline void write_u32(std::ostream& out, uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }
inline void write_u64(std::ostream& out, uint64_t v) { out.write(reinterpret_cast<const char*>(&v), 8); }

inline uint32_t read_u32(std::istream& in) {
  uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), 4);
  check(in.good(), "checkpoint truncated");
  return v;
}

inline uint64_t read_u64(std::istream& in) {
  uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), 8);
  check(in.good(), "checkpoint truncated");
  return v;
}

inline void write_tensor(std::ostream& out, const std::string& name, const MatD& m) {
  write_u32(out, static_cast<uint32_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  write_u32(out, static_cast<uint32_t>(m.rows()));
  write_u32(out, static_cast<uint32_t>(m.cols()));
  out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * 8));
}

inline std::pair<std::string, MatD> read_tensor(std::istream& in) {
  const uint32_t name_len = read_u32(in);
  std::string name(name_len, '\0');
  in.read(name.data(), name_len);
  const uint32_t rows = read_u32(in), cols = read_u32(in);
  MatD m(rows, cols);
  in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * 8));
  check(in.good(), "checkpoint truncated");
  return {std::move(name), std::move(m)};
}

}  // namespace detail

template <class S>
void save_checkpoint(const S4MModelT<S>& model, const Vocab& vocab, const std::string& path) {
  check(model.has_topics(), "save_checkpoint: model has no topic embeddings");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  check(out.good(), "cannot open checkpoint for writing: " + path);

  nlohmann::json header;
  header["model"] = model.config().to_json();
  header["vocab"] = nlohmann::json::parse(vocab.to_json());
  header["knowledge"] = {{"general", model.topics()}, {"regions", model.topic_regions()}};
  header["ipg_stripped"] = model.ipg_stripped();
  const std::string header_str = header.dump();

  out.write(kCkptTag, static_cast<std::streamsize>(std::strlen(kCkptTag)));
  out.put('\n');
  detail::write_u64(out, header_str.size());
  out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));

  const auto& ps = model.params();
  detail::write_u32(out, static_cast<uint32_t>(ps.count()) + 1);
  detail::write_tensor(out, "topic.embeddings", model.topic_matrix().template cast<double>());
  for (int i = 0; i < ps.count(); ++i) {
    detail::write_tensor(out, ps.name(i), ps.value(i).template cast<double>());
  }
  check(out.good(), "checkpoint write failed: " + path);
}

template <class S>
struct LoadedModel {
  S4MModelT<S> model;
  Vocab vocab;
};

template <class S>
LoadedModel<S> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  check(in.good(), "cannot open checkpoint: " + path);

  std::string tag(std::strlen(kCkptTag), '\0');
  in.read(tag.data(), static_cast<std::streamsize>(tag.size()));
  check(in.good() && in.get() == '\n' && tag == kCkptTag,
        "checkpoint format mismatch: expected tag \"" + std::string(kCkptTag) + "\"");

  const uint64_t header_len = detail::read_u64(in);
  std::string header_str(header_len, '\0');
  in.read(header_str.data(), static_cast<std::streamsize>(header_len));
  check(in.good(), "checkpoint truncated");
  nlohmann::json header = nlohmann::json::parse(header_str);

  ModelConfig cfg = ModelConfig::from_json(header.at("model"));
  Vocab vocab = Vocab::from_json(header.at("vocab").dump());
  const bool stripped = header.at("ipg_stripped").get<bool>();

  std::map<std::string, MatD> tensors;
  const uint32_t n_tensors = detail::read_u32(in);
  for (uint32_t i = 0; i < n_tensors; ++i) {
    auto [name, m] = detail::read_tensor(in);
    tensors.emplace(std::move(name), std::move(m));
  }

  LoadedModel<S> loaded{S4MModelT<S>(cfg, /*init_seed=*/0), std::move(vocab)};
  S4MModelT<S>& model = loaded.model;

  auto topics = header.at("knowledge").at("general").get<TopicSet>();
  auto regions = header.at("knowledge").at("regions").get<std::map<std::string, TopicSet>>();
  auto te = tensors.find("topic.embeddings");
  check(te != tensors.end(), "checkpoint missing topic.embeddings");
  model.set_topics_raw(topics, regions, te->second);
  tensors.erase(te);

  auto& ps = model.params();
  for (int i = 0; i < ps.count(); ++i) {
    const std::string& name = ps.name(i);
    auto it = tensors.find(name);
    if (it == tensors.end()) {
      if (stripped && name.rfind("ipg.", 0) == 0) continue;  // stripped head, init values stay
      fail("checkpoint missing tensor: " + name);
    }
    check(it->second.rows() == ps.value(i).rows() && it->second.cols() == ps.value(i).cols(),
          "checkpoint tensor shape mismatch: " + name);
    ps.value(i) = it->second.template cast<S>();
    tensors.erase(it);
  }
  if (!tensors.empty()) fail("checkpoint has unknown tensor: " + tensors.begin()->first);
  if (stripped) model.mark_ipg_stripped();
  return loaded;
}

// Rewrites a checkpoint without the IPG branch tensors (the branch is
// training-only; generation must be unaffected).
inline void strip_ipg_checkpoint(const std::string& in_path, const std::string& out_path) {
  std::ifstream in(in_path, std::ios::binary);
  check(in.good(), "cannot open checkpoint: " + in_path);
  std::string tag(std::strlen(kCkptTag), '\0');
  in.read(tag.data(), static_cast<std::streamsize>(tag.size()));
  check(in.good() && in.get() == '\n' && tag == kCkptTag, "checkpoint format mismatch: " + in_path);
  const uint64_t header_len = detail::read_u64(in);
  std::string header_str(header_len, '\0');
  in.read(header_str.data(), static_cast<std::streamsize>(header_len));
  nlohmann::json header = nlohmann::json::parse(header_str);
  header["ipg_stripped"] = true;

  std::vector<std::pair<std::string, MatD>> kept;
  const uint32_t n_tensors = detail::read_u32(in);
  for (uint32_t i = 0; i < n_tensors; ++i) {
    auto named = detail::read_tensor(in);
    if (named.first.rfind("ipg.", 0) == 0) continue;
    kept.push_back(std::move(named));
  }

  std::ofstream out(out_path, std::ios::binary | std::ios::trunc);
  check(out.good(), "cannot open checkpoint for writing: " + out_path);
  const std::string new_header = header.dump();
  out.write(kCkptTag, static_cast<std::streamsize>(std::strlen(kCkptTag)));
  out.put('\n');
  detail::write_u64(out, new_header.size());
  out.write(new_header.data(), static_cast<std::streamsize>(new_header.size()));
  detail::write_u32(out, static_cast<uint32_t>(kept.size()));
  for (const auto& [name, m] : kept) detail::write_tensor(out, name, m);
  check(out.good(), "checkpoint write failed: " + out_path);
}

}  // namespace s4m
