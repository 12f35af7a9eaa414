#include "comatch/tensor_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace comatch {

namespace {

[[noreturn]] void fail_at(const std::string& path, uint64_t offset,
                          const std::string& what) {
  throw std::runtime_error(path + ": " + what + " at byte offset " +
                           std::to_string(offset));
}

uint32_t read_u32_le(std::istream& in, const std::string& path,
                     uint64_t offset, const char* what) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) fail_at(path, offset, std::string("truncated ") + what);
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) |
         (static_cast<uint32_t>(b[3]) << 24);
}

void write_u32_le(std::ostream& out, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

}  // namespace

void write_tensor(const std::string& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error(path + ": cannot open for writing");
  out.write("TSR1", 4);
  write_u32_le(out, static_cast<uint32_t>(t.rank()));
  for (int i = 0; i < t.rank(); ++i)
    write_u32_le(out, static_cast<uint32_t>(t.dim(i)));
  static_assert(sizeof(float) == 4);
  for (int i = 0; i < t.size(); ++i) {
    float v = t.at(i);
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    write_u32_le(out, bits);
  }
  if (!out) throw std::runtime_error(path + ": write failed");
}

Tensor read_tensor(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(path + ": cannot open");
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "TSR1", 4) != 0)
    fail_at(path, 0, "bad magic (expected TSR1)");
  uint64_t offset = 4;
  uint32_t rank = read_u32_le(in, path, offset, "rank");
  offset += 4;
  if (rank == 0 || rank > 8) fail_at(path, 4, "unreasonable rank");
  std::vector<int> shape(rank);
  uint64_t count = 1;
  for (uint32_t i = 0; i < rank; ++i) {
    uint32_t d = read_u32_le(in, path, offset, "dim");
    offset += 4;
    if (d == 0 || d > (1u << 24)) fail_at(path, offset - 4, "unreasonable dim");
    shape[i] = static_cast<int>(d);
    count *= d;
  }
  if (count > (1ull << 28)) fail_at(path, offset, "payload too large");
  std::vector<float> data(count);
  for (uint64_t i = 0; i < count; ++i) {
    uint32_t bits = read_u32_le(in, path, offset, "payload");
    offset += 4;
    std::memcpy(&data[i], &bits, 4);
  }
  char extra;
  if (in.read(&extra, 1))
    fail_at(path, offset, "trailing bytes after payload");
  return Tensor(std::move(shape), std::move(data));
}

Tensor read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(path + ": cannot open");
  auto next_token = [&](const char* what) {
    // skips whitespace and '#' comment lines, per the PGM grammar
    std::string tok;
    int ch;
    while ((ch = in.get()) != EOF) {
      if (ch == '#') {
        while ((ch = in.get()) != EOF && ch != '\n') {
        }
      } else if (!std::isspace(ch)) {
        tok.push_back(static_cast<char>(ch));
        while ((ch = in.peek()) != EOF && !std::isspace(ch)) {
          tok.push_back(static_cast<char>(in.get()));
        }
        return tok;
      }
    }
    throw std::runtime_error(path + ": truncated header reading " +
                             std::string(what));
  };
  if (next_token("magic") != "P5")
    throw std::runtime_error(path + ": not a P5 PGM");
  int w = std::stoi(next_token("width"));
  int h = std::stoi(next_token("height"));
  int maxval = std::stoi(next_token("maxval"));
  if (w <= 0 || h <= 0 || maxval != 255)
    throw std::runtime_error(path + ": unsupported PGM header");
  in.get();  // single whitespace byte before pixel data
  std::vector<unsigned char> raw(static_cast<size_t>(w) * h);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!in) throw std::runtime_error(path + ": truncated pixel data");
  Tensor img({h, w, 1});
  for (size_t i = 0; i < raw.size(); ++i)
    img.at(static_cast<int>(i)) = static_cast<float>(raw[i]) / 255.0f;
  return img;
}

void write_pgm(const std::string& path, const Tensor& image) {
  if (image.rank() != 3 || image.dim(2) != 1)
    throw std::invalid_argument("write_pgm: image must be [H,W,1]");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error(path + ": cannot open for writing");
  out << "P5\n" << image.dim(1) << " " << image.dim(0) << "\n255\n";
  for (int i = 0; i < image.size(); ++i) {
    float v = std::clamp(image.at(i), 0.0f, 1.0f);
    int byte = static_cast<int>(std::lround(v * 255.0));
    out.put(static_cast<char>(std::clamp(byte, 0, 255)));
  }
  if (!out) throw std::runtime_error(path + ": write failed");
}

}  // namespace comatch
