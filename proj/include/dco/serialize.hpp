// SPDX-License-Identifier: Apache-2.0
//
// Versioned binary container for checkpoints and adapters: a JSON header,
// little-endian f64 parameter arrays and a trailing integrity checksum.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "dco/lora.hpp"
#include "dco/model.hpp"

namespace dco {

std::uint64_t fnv1a(const unsigned char* data, std::size_t n,
                    std::uint64_t seed = 0xcbf29ce484222325ULL);

class ByteWriter {
 public:
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f64(double v);
  void bytes(const void* p, std::size_t n);
  void f64_array(const std::vector<double>& v);
  const std::vector<unsigned char>& data() const { return buf_; }

 private:
  std::vector<unsigned char> buf_;
};

class ByteReader {
 public:
  ByteReader(const unsigned char* data, std::size_t n);
  std::uint32_t u32();
  std::uint64_t u64();
  double f64();
  void bytes(void* out, std::size_t n);
  std::size_t remaining() const { return end_ - pos_; }
  std::size_t offset() const;

 private:
  void need(std::size_t n) const;
  const unsigned char* pos_;
  const unsigned char* end_;
  const unsigned char* begin_;
};

struct Container {
  nlohmann::json header;
  std::vector<std::vector<double>> arrays;
};

void write_container(const std::string& path, const Container& c);
Container read_container(const std::string& path);

void save_model(const EpsModel& m, const std::string& path);
EpsModel load_model(const std::string& path);

// Persists the adapter factors, tau, learned token rows and the checksum of
// the base the adapter was trained against.
void save_adapter(const AdaptedModel& m, const std::string& path);

// Reattaches a stored adapter. A base checksum mismatch is reported as a
// warning on stderr (and through `mismatch` when given), not an error.
AdaptedModel load_adapter(const EpsModel& base, const std::string& path,
                          bool* mismatch = nullptr);

}  // namespace dco
