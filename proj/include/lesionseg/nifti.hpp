#pragma once

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "lesionseg/volume.hpp"

namespace lesionseg {

enum class NiftiErrorKind {
  io,
  not_nifti,
  byte_order,
  bad_magic,
  detached_header,
  bad_dimensionality,
  unsupported_datatype,
  truncated,
};

class NiftiError : public std::runtime_error {
 public:
  NiftiError(NiftiErrorKind kind, const std::string& msg)
      : std::runtime_error(msg), kind_(kind) {}
  NiftiErrorKind kind() const { return kind_; }

 private:
  NiftiErrorKind kind_;
};

enum class NiftiDatatype : std::int16_t {
  uint8 = 2,
  int16 = 4,
  int32 = 8,
  float32 = 16,
  float64 = 64,
};

namespace detail {

constexpr std::size_t kNiftiHeaderSize = 348;

template <typename T>
T get_at(const unsigned char* buf, std::size_t off) {
  T v;
  std::memcpy(&v, buf + off, sizeof(T));
  return v;
}

template <typename T>
void put_at(unsigned char* buf, std::size_t off, T v) {
  std::memcpy(buf + off, &v, sizeof(T));
}

inline std::size_t bytes_per_voxel(std::int16_t dt) {
  switch (static_cast<NiftiDatatype>(dt)) {
    case NiftiDatatype::uint8: return 1;
    case NiftiDatatype::int16: return 2;
    case NiftiDatatype::int32: return 4;
    case NiftiDatatype::float32: return 4;
    case NiftiDatatype::float64: return 8;
  }
  return 0;
}

/// Reads the whole file, transparently inflating gzip (0x1f8b prefix).
inline std::vector<unsigned char> read_all_maybe_gz(const std::string& path) {
  gzFile f = gzopen(path.c_str(), "rb");
  if (f == nullptr) throw NiftiError(NiftiErrorKind::io, "cannot open file: " + path);
  std::vector<unsigned char> out;
  unsigned char chunk[1 << 16];
  int n;
  while ((n = gzread(f, chunk, sizeof(chunk))) > 0) {
    out.insert(out.end(), chunk, chunk + n);
  }
  const bool read_error = n < 0;
  gzclose(f);
  if (read_error) throw NiftiError(NiftiErrorKind::io, "read error: " + path);
  return out;
}

}  // namespace detail

/// Loads a single-file NIfTI-1 volume (magic "n+1", optionally gzipped).
/// Data is converted to 32-bit reals; scl_slope/scl_inter are applied when
/// scl_slope is nonzero; spacing comes from pixdim.
inline Volume load_nifti(const std::string& path) {
  using namespace detail;
  const auto bytes = read_all_maybe_gz(path);
  if (bytes.size() < kNiftiHeaderSize + 4) {
    throw NiftiError(NiftiErrorKind::not_nifti,
                     "file too small for a NIfTI-1 header: " + path);
  }
  const unsigned char* h = bytes.data();
  const auto sizeof_hdr = get_at<std::int32_t>(h, 0);
  if (sizeof_hdr != 348) {
    if (sizeof_hdr == 1543569408) {  // 348 byte-swapped
      throw NiftiError(NiftiErrorKind::byte_order,
                       "big-endian NIfTI files are not supported: " + path);
    }
    throw NiftiError(NiftiErrorKind::not_nifti, "not a NIfTI-1 file: " + path);
  }
  char magic[4];
  std::memcpy(magic, h + 344, 4);
  if (std::memcmp(magic, "ni1", 3) == 0) {
    throw NiftiError(NiftiErrorKind::detached_header,
                     "detached-header NIfTI (magic 'ni1') is not supported: " + path);
  }
  if (std::memcmp(magic, "n+1", 3) != 0) {
    throw NiftiError(NiftiErrorKind::bad_magic, "bad NIfTI magic in " + path);
  }
  const auto dim0 = get_at<std::int16_t>(h, 40);
  if (dim0 != 3) {
    throw NiftiError(NiftiErrorKind::bad_dimensionality,
                     "expected a 3-dimensional volume, got dim[0]=" +
                         std::to_string(dim0) + " in " + path);
  }
  const std::size_t nx = static_cast<std::uint16_t>(get_at<std::int16_t>(h, 42));
  const std::size_t ny = static_cast<std::uint16_t>(get_at<std::int16_t>(h, 44));
  const std::size_t nz = static_cast<std::uint16_t>(get_at<std::int16_t>(h, 46));
  if (nx == 0 || ny == 0 || nz == 0) {
    throw NiftiError(NiftiErrorKind::bad_dimensionality,
                     "zero extent in NIfTI dims: " + path);
  }
  const auto datatype = get_at<std::int16_t>(h, 70);
  const std::size_t bpv = bytes_per_voxel(datatype);
  if (bpv == 0) {
    throw NiftiError(NiftiErrorKind::unsupported_datatype,
                     "unsupported NIfTI datatype code " + std::to_string(datatype) +
                         " in " + path);
  }
  const auto vox_offset = static_cast<std::size_t>(get_at<float>(h, 108));
  const float scl_slope = get_at<float>(h, 112);
  const float scl_inter = get_at<float>(h, 116);
  const std::size_t n = nx * ny * nz;
  if (vox_offset < kNiftiHeaderSize || bytes.size() < vox_offset + n * bpv) {
    throw NiftiError(NiftiErrorKind::truncated, "truncated NIfTI payload: " + path);
  }

  Volume v;
  v.data = Tensor<float>({nz, ny, nx});
  const unsigned char* src = bytes.data() + vox_offset;
  auto convert = [&](auto extract) {
    for (std::size_t i = 0; i < n; ++i) v.data[i] = extract(src, i);
  };
  switch (static_cast<NiftiDatatype>(datatype)) {
    case NiftiDatatype::uint8:
      convert([](const unsigned char* s, std::size_t i) { return static_cast<float>(s[i]); });
      break;
    case NiftiDatatype::int16:
      convert([](const unsigned char* s, std::size_t i) {
        return static_cast<float>(get_at<std::int16_t>(s, 2 * i));
      });
      break;
    case NiftiDatatype::int32:
      convert([](const unsigned char* s, std::size_t i) {
        return static_cast<float>(get_at<std::int32_t>(s, 4 * i));
      });
      break;
    case NiftiDatatype::float32:
      convert([](const unsigned char* s, std::size_t i) { return get_at<float>(s, 4 * i); });
      break;
    case NiftiDatatype::float64:
      convert([](const unsigned char* s, std::size_t i) {
        return static_cast<float>(get_at<double>(s, 8 * i));
      });
      break;
  }
  if (scl_slope != 0.f && !(scl_slope == 1.f && scl_inter == 0.f)) {
    for (std::size_t i = 0; i < n; ++i) v.data[i] = v.data[i] * scl_slope + scl_inter;
  }

  const float px = get_at<float>(h, 76 + 4);   // pixdim[1] (x)
  const float py = get_at<float>(h, 76 + 8);   // pixdim[2] (y)
  const float pz = get_at<float>(h, 76 + 12);  // pixdim[3] (z)
  v.spacing = {pz > 0.f ? pz : 1.f, py > 0.f ? py : 1.f, px > 0.f ? px : 1.f};

  const auto qform_code = get_at<std::int16_t>(h, 252);
  if (qform_code > 0) {
    const float qb = get_at<float>(h, 256), qc = get_at<float>(h, 260),
                qd = get_at<float>(h, 264);
    if (qb != 0.f || qc != 0.f || qd != 0.f) {
      std::cerr << "lesionseg: warning: ignoring non-axis-aligned orientation in "
                << path << "\n";
    }
  }
  v.origin = {get_at<float>(h, 276), get_at<float>(h, 272), get_at<float>(h, 268)};
  return v;
}

/// Writes a conformant single-file NIfTI-1 (gzipped when the path ends in
/// ".gz"). Masks should use NiftiDatatype::uint8.
inline void save_nifti(const Volume& volume, const std::string& path,
                       NiftiDatatype datatype = NiftiDatatype::float32) {
  using namespace detail;
  if (datatype != NiftiDatatype::float32 && datatype != NiftiDatatype::uint8) {
    throw NiftiError(NiftiErrorKind::unsupported_datatype,
                     "save_nifti supports float32 and uint8 output only");
  }
  volume.check();
  const std::size_t n = volume.size();
  const std::size_t bpv = bytes_per_voxel(static_cast<std::int16_t>(datatype));

  std::vector<unsigned char> out(kNiftiHeaderSize + 4 + n * bpv, 0);
  unsigned char* h = out.data();
  put_at<std::int32_t>(h, 0, 348);
  put_at<std::int16_t>(h, 40, 3);  // dim[0]
  put_at<std::int16_t>(h, 42, static_cast<std::int16_t>(volume.w()));
  put_at<std::int16_t>(h, 44, static_cast<std::int16_t>(volume.h()));
  put_at<std::int16_t>(h, 46, static_cast<std::int16_t>(volume.d()));
  for (std::size_t a = 4; a < 8; ++a) put_at<std::int16_t>(h, 40 + 2 * a, 1);
  put_at<std::int16_t>(h, 70, static_cast<std::int16_t>(datatype));
  put_at<std::int16_t>(h, 72, static_cast<std::int16_t>(8 * bpv));  // bitpix
  put_at<float>(h, 76, 1.f);                                        // qfac
  put_at<float>(h, 76 + 4, volume.spacing[2]);
  put_at<float>(h, 76 + 8, volume.spacing[1]);
  put_at<float>(h, 76 + 12, volume.spacing[0]);
  put_at<float>(h, 108, 352.f);  // vox_offset
  put_at<float>(h, 112, 0.f);    // scl_slope: no rescaling
  put_at<float>(h, 116, 0.f);
  put_at<float>(h, 268, volume.origin[2]);  // qoffset_x
  put_at<float>(h, 272, volume.origin[1]);
  put_at<float>(h, 276, volume.origin[0]);
  std::memcpy(h + 344, "n+1\0", 4);

  unsigned char* dst = out.data() + kNiftiHeaderSize + 4;
  if (datatype == NiftiDatatype::float32) {
    std::memcpy(dst, volume.data.data(), n * 4);
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      dst[i] = volume.data[i] != 0.f ? 1 : 0;  // masks are strictly {0,1}
    }
  }

  const bool gz = path.size() > 3 && path.compare(path.size() - 3, 3, ".gz") == 0;
  if (gz) {
    gzFile f = gzopen(path.c_str(), "wb");
    if (f == nullptr) throw NiftiError(NiftiErrorKind::io, "cannot write: " + path);
    const int wrote = gzwrite(f, out.data(), static_cast<unsigned>(out.size()));
    gzclose(f);
    if (wrote != static_cast<int>(out.size())) {
      throw NiftiError(NiftiErrorKind::io, "short write: " + path);
    }
  } else {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw NiftiError(NiftiErrorKind::io, "cannot write: " + path);
    f.write(reinterpret_cast<const char*>(out.data()),
            static_cast<std::streamsize>(out.size()));
    if (!f) throw NiftiError(NiftiErrorKind::io, "short write: " + path);
  }
}

/// Loads and assembles a case: both modalities z-scored over the brain mask,
/// lesion mask binarized at > 0.5, brain mask defaulting to the nonzero
/// support of the raw FLAIR image.
inline Case load_case(const std::string& flair_path, const std::string& t1_path,
                      const std::string& lesion_path = "",
                      const std::string& brain_mask_path = "",
                      const std::string& id = "") {
  Volume flair = load_nifti(flair_path);
  Volume t1 = load_nifti(t1_path);
  if (flair.data.shape() != t1.data.shape()) {
    throw ShapeError("shape mismatch: " + t1_path + " is " + shape_str(t1.data.shape()) +
                     " but " + flair_path + " is " + shape_str(flair.data.shape()));
  }
  std::optional<Volume> lesion, brain;
  if (!lesion_path.empty()) {
    lesion = load_nifti(lesion_path);
    if (lesion->data.shape() != flair.data.shape()) {
      throw ShapeError("shape mismatch: " + lesion_path + " is " +
                       shape_str(lesion->data.shape()) + " but " + flair_path + " is " +
                       shape_str(flair.data.shape()));
    }
  }
  if (!brain_mask_path.empty()) {
    brain = load_nifti(brain_mask_path);
    if (brain->data.shape() != flair.data.shape()) {
      throw ShapeError("shape mismatch: " + brain_mask_path + " is " +
                       shape_str(brain->data.shape()) + " but " + flair_path + " is " +
                       shape_str(flair.data.shape()));
    }
  }
  return make_case(id.empty() ? flair_path : id, flair, t1, lesion, brain);
}

}  // namespace lesionseg
