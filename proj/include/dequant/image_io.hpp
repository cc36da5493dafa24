#pragma once

// 8-bit PNG (gray / RGB) and binary PGM (P5) / PPM (P6) codecs.
// Bytes map to v/255 on load; values map to round(x*255) on save.

#include <png.h>

#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "dequant/error.hpp"
#include "dequant/image.hpp"

namespace dequant {

/// x in [0,1] to a byte, rounding half away from zero.
inline std::uint8_t to_byte(double x) {
  const long v = std::lround(std::clamp(x, 0.0, 1.0) * 255.0);
  return static_cast<std::uint8_t>(std::clamp(v, 0L, 255L));
}

inline double from_byte(std::uint8_t v) { return static_cast<double>(v) / 255.0; }

inline std::vector<std::uint8_t> to_bytes(const ImageTensor& img) {
  std::vector<std::uint8_t> out(img.size());
  for (std::size_t i = 0; i < img.size(); ++i) out[i] = to_byte(img[i]);
  return out;
}

inline ImageTensor from_bytes(Shape shape, std::span<const std::uint8_t> bytes) {
  std::vector<double> v(bytes.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) v[i] = from_byte(bytes[i]);
  return ImageTensor(shape, std::move(v));
}

namespace detail {

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

inline bool has_png_signature(std::span<const std::uint8_t> bytes) {
  return bytes.size() >= 8 && png_sig_cmp(bytes.data(), 0, 8) == 0;
}

inline ImageTensor decode_png(std::span<const std::uint8_t> bytes, const std::string& name) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
    throw FormatError(FormatError::Kind::Malformed, name + ": " + image.message);
  }
  if (image.format & PNG_FORMAT_FLAG_LINEAR) {
    png_image_free(&image);
    throw FormatError(FormatError::Kind::Unsupported, name + ": unsupported bit depth 16");
  }
  if (image.format & PNG_FORMAT_FLAG_ALPHA) {
    png_image_free(&image);
    throw FormatError(FormatError::Kind::Unsupported, name + ": alpha channel not supported");
  }
  const bool color = (image.format & PNG_FORMAT_FLAG_COLOR) != 0;
  image.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  const Shape shape{image.height, image.width, color ? 3u : 1u};
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw FormatError(FormatError::Kind::Malformed, name + ": " + msg);
  }
  return from_bytes(shape, buf);
}

inline std::vector<std::uint8_t> encode_png(const ImageTensor& img) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width());
  image.height = static_cast<png_uint_32>(img.height());
  image.format = img.channels() == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  const auto pixels = to_bytes(img);
  png_alloc_size_t size = 0;
  if (!png_image_write_get_memory_size(image, size, 0, pixels.data(), 0, nullptr)) {
    throw IoError(std::string("png encode: ") + image.message);
  }
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&image, out.data(), &size, 0, pixels.data(), 0, nullptr)) {
    throw IoError(std::string("png encode: ") + image.message);
  }
  out.resize(size);
  return out;
}

// Netpbm header tokenizer: whitespace separated, '#' starts a comment to end of line.
class PnmHeader {
 public:
  PnmHeader(std::span<const std::uint8_t> bytes, const std::string& name) : bytes_(bytes), name_(name) {}

  unsigned long next_number(const char* what) {
    skip_space_and_comments();
    unsigned long v = 0;
    bool any = false;
    while (pos_ < bytes_.size() && std::isdigit(bytes_[pos_])) {
      v = v * 10 + (bytes_[pos_] - '0');
      if (v > 1u << 24) malformed(std::string(what) + " too large");
      any = true;
      ++pos_;
    }
    if (!any) malformed(std::string("expected ") + what);
    return v;
  }

  // Exactly one whitespace byte separates maxval from the raster.
  std::size_t raster_offset() {
    if (pos_ >= bytes_.size() || !std::isspace(bytes_[pos_])) malformed("missing raster separator");
    return pos_ + 1;
  }

 private:
  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      if (std::isspace(bytes_[pos_])) {
        ++pos_;
      } else if (bytes_[pos_] == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else {
        break;
      }
    }
  }

  [[noreturn]] void malformed(const std::string& detail) const {
    throw FormatError(FormatError::Kind::Malformed, name_ + ": " + detail);
  }

  std::span<const std::uint8_t> bytes_;
  std::string name_;
  std::size_t pos_ = 2;
};

inline ImageTensor decode_pnm(std::span<const std::uint8_t> bytes, const std::string& name) {
  const std::size_t channels = bytes[1] == '6' ? 3 : 1;
  PnmHeader header(bytes, name);
  const auto width = header.next_number("width");
  const auto height = header.next_number("height");
  const auto maxval = header.next_number("maxval");
  if (width == 0 || height == 0) {
    throw FormatError(FormatError::Kind::Malformed, name + ": zero image dimension");
  }
  if (maxval != 255) {
    throw FormatError(FormatError::Kind::Unsupported,
                      name + ": unsupported maxval " + std::to_string(maxval) + " (only 255)");
  }
  const std::size_t offset = header.raster_offset();
  const Shape shape{height, width, channels};
  if (bytes.size() < offset + shape.size()) {
    throw FormatError(FormatError::Kind::Truncated,
                      name + ": raster has " + std::to_string(bytes.size() - std::min(offset, bytes.size())) +
                          " bytes, expected " + std::to_string(shape.size()));
  }
  return from_bytes(shape, bytes.subspan(offset, shape.size()));
}

inline std::vector<std::uint8_t> encode_pnm(const ImageTensor& img) {
  const std::string header = std::string(img.channels() == 3 ? "P6" : "P5") + "\n" +
                             std::to_string(img.width()) + " " + std::to_string(img.height()) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  const auto px = to_bytes(img);
  out.insert(out.end(), px.begin(), px.end());
  return out;
}

inline std::string lower_extension(const std::filesystem::path& path) {
  std::string ext = path.extension().string();
  for (auto& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return ext;
}

}  // namespace detail

/// Decodes PNG, PGM (P5) or PPM (P6) from memory, sniffing the magic bytes.
inline ImageTensor decode_image(std::span<const std::uint8_t> bytes, const std::string& name = "<memory>") {
  if (detail::has_png_signature(bytes)) return detail::decode_png(bytes, name);
  if (bytes.size() >= 2 && bytes[0] == 'P' && (bytes[1] == '5' || bytes[1] == '6')) {
    return detail::decode_pnm(bytes, name);
  }
  if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] >= '1' && bytes[1] <= '7') {
    throw FormatError(FormatError::Kind::Unsupported,
                      name + ": only binary P5/P6 netpbm is supported, got P" + static_cast<char>(bytes[1]));
  }
  throw FormatError(FormatError::Kind::Malformed, name + ": unrecognized image signature");
}

inline ImageTensor load_image(const std::filesystem::path& path) {
  return decode_image(detail::read_file(path), path.string());
}

/// Writes PNG for .png, netpbm for .pgm/.ppm/.pnm (P5 or P6 chosen by channel count).
inline void save_image(const ImageTensor& img, const std::filesystem::path& path) {
  const auto ext = detail::lower_extension(path);
  if (ext == ".png") {
    detail::write_file(path, detail::encode_png(img));
  } else if (ext == ".pgm" || ext == ".ppm" || ext == ".pnm") {
    if (ext == ".pgm" && img.channels() != 1) throw ShapeError("PGM output requires 1 channel");
    if (ext == ".ppm" && img.channels() != 3) throw ShapeError("PPM output requires 3 channels");
    detail::write_file(path, detail::encode_pnm(img));
  } else {
    throw FormatError(FormatError::Kind::Unsupported, "unsupported output extension '" + ext + "'");
  }
}

}  // namespace dequant
