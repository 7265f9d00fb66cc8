#include "fedleak/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "fedleak/prng.hpp"

namespace fedleak {

void ImageBatch::validate() const {
  if (images.empty()) throw std::invalid_argument("ImageBatch: empty batch");
  if (images.size() != labels.size())
    throw std::invalid_argument("ImageBatch: labels length " +
                                std::to_string(labels.size()) +
                                " != batch size " +
                                std::to_string(images.size()));
  for (const Tensor& im : images) {
    for (std::size_t i = 0; i < im.size(); ++i) {
      if (!(im[i] >= 0.0 && im[i] <= 1.0))
        throw std::invalid_argument("ImageBatch: pixel outside [0,1]");
    }
  }
}

BrightnessProfile BrightnessMixture::moments() const {
  double wsum = 0.0, m = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    wsum += weights[i];
    m += weights[i] * components[i].mean;
  }
  m /= wsum;
  double var = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const double d = components[i].mean - m;
    var += weights[i] * (components[i].sd * components[i].sd + d * d);
  }
  return {m, std::sqrt(var / wsum)};
}

void BrightnessMixture::validate() const {
  if (weights.empty() || weights.size() != components.size())
    throw std::invalid_argument("BrightnessMixture: weights/components mismatch");
  for (double w : weights)
    if (!(w > 0.0)) throw std::invalid_argument("BrightnessMixture: weights must be > 0");
  for (const auto& c : components)
    if (!(c.sd >= 0.0)) throw std::invalid_argument("BrightnessMixture: sd must be >= 0");
}

double summed_channel_mean(const Tensor& image) {
  const std::size_t hw = image.dim(1) * image.dim(2);
  return image.sum() / double(hw);
}

namespace {

std::uint32_t read_be32(std::istream& in, const std::string& what) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4))
    throw std::runtime_error("truncated file while reading " + what);
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
         (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

}  // namespace

ImagePool load_mnist(const std::string& images_path,
                     const std::string& labels_path) {
  std::ifstream imf(images_path, std::ios::binary);
  if (!imf) throw std::runtime_error("cannot open " + images_path);
  std::ifstream lbf(labels_path, std::ios::binary);
  if (!lbf) throw std::runtime_error("cannot open " + labels_path);

  const std::uint32_t im_magic = read_be32(imf, "image magic");
  if (im_magic != 2051)
    throw std::runtime_error("bad IDX image magic " + std::to_string(im_magic) +
                             " (expected 2051) in " + images_path);
  const std::uint32_t lb_magic = read_be32(lbf, "label magic");
  if (lb_magic != 2049)
    throw std::runtime_error("bad IDX label magic " + std::to_string(lb_magic) +
                             " (expected 2049) in " + labels_path);

  const std::uint32_t n = read_be32(imf, "image count");
  const std::uint32_t rows = read_be32(imf, "rows");
  const std::uint32_t cols = read_be32(imf, "cols");
  const std::uint32_t ln = read_be32(lbf, "label count");
  if (n != ln)
    throw std::runtime_error("image/label count mismatch: " +
                             std::to_string(n) + " vs " + std::to_string(ln));

  ImagePool pool;
  pool.channels = 1;
  pool.height = rows;
  pool.width = cols;
  pool.images.reserve(n);
  pool.labels.resize(n);

  std::vector<unsigned char> buf(std::size_t(rows) * cols);
  for (std::uint32_t i = 0; i < n; ++i) {
    if (!imf.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size())))
      throw std::runtime_error("truncated image data in " + images_path);
    Tensor im({1, rows, cols});
    for (std::size_t p = 0; p < buf.size(); ++p)
      im[p] = double(buf[p]) / 255.0;
    pool.images.push_back(std::move(im));
  }
  std::vector<unsigned char> lbl(n);
  if (!lbf.read(reinterpret_cast<char*>(lbl.data()), std::streamsize(n)))
    throw std::runtime_error("truncated label data in " + labels_path);
  for (std::uint32_t i = 0; i < n; ++i) pool.labels[i] = lbl[i];
  return pool;
}

ImagePool load_cifar(const std::vector<std::string>& binary_paths,
                     CifarVariant variant) {
  const std::size_t label_bytes = variant == CifarVariant::cifar10 ? 1 : 2;
  const std::size_t record = label_bytes + 3072;

  ImagePool pool;
  pool.channels = 3;
  pool.height = 32;
  pool.width = 32;

  for (const std::string& path : binary_paths) {
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    if (!f) throw std::runtime_error("cannot open " + path);
    const std::size_t bytes = std::size_t(f.tellg());
    if (bytes % record != 0)
      throw std::runtime_error(
          path + ": size " + std::to_string(bytes) +
          " is not a multiple of the record size " + std::to_string(record));
    f.seekg(0);
    const std::size_t n = bytes / record;
    std::vector<unsigned char> buf(record);
    for (std::size_t i = 0; i < n; ++i) {
      if (!f.read(reinterpret_cast<char*>(buf.data()), std::streamsize(record)))
        throw std::runtime_error("truncated record in " + path);
      // cifar100 records carry coarse then fine; keep the fine label.
      pool.labels.push_back(buf[label_bytes - 1]);
      Tensor im({3, 32, 32});
      for (std::size_t p = 0; p < 3072; ++p)
        im[p] = double(buf[label_bytes + p]) / 255.0;
      pool.images.push_back(std::move(im));
    }
  }
  return pool;
}

Tensor synth_image(const BrightnessProfile& profile, std::size_t channels,
                   std::size_t height, std::size_t width,
                   std::uint64_t seed) {
  if (!(profile.sd >= 0.0))
    throw std::invalid_argument("synth_image: profile sd must be >= 0");
  Prng rng(seed);
  const double c = double(channels);
  double target = profile.mean;
  if (profile.sd > 0.0) target += profile.sd * rng.next_normal();
  // Clamp to the feasible summed-channel mean range, then hit it exactly.
  target = std::clamp(target, 0.0, c);

  Tensor im({channels, height, width});
  for (std::size_t i = 0; i < im.size(); ++i) im[i] = rng.next_double();

  const double mu_t = target / c;  // required mean over all pixels
  const double mu0 = im.mean();
  if (mu_t <= mu0) {
    // Shrink toward 0; keeps pixels in [0, 1] and lands the mean exactly.
    const double s = mu0 > 0.0 ? mu_t / mu0 : 0.0;
    im.scale(s);
  } else {
    // Mirror trick: shrink the complement toward 0 instead.
    const double s = (1.0 - mu_t) / (1.0 - mu0);
    for (std::size_t i = 0; i < im.size(); ++i)
      im[i] = 1.0 - (1.0 - im[i]) * s;
  }
  return im;
}

ImagePool synth_dataset(const BrightnessProfile& profile, std::size_t count,
                        std::size_t channels, std::size_t height,
                        std::size_t width, std::uint64_t seed,
                        std::size_t num_classes) {
  ImagePool pool;
  pool.channels = channels;
  pool.height = height;
  pool.width = width;
  pool.images.reserve(count);
  pool.labels.reserve(count);
  Prng label_rng(derive_seed(seed, 0x1abe1));
  for (std::size_t i = 0; i < count; ++i) {
    pool.images.push_back(synth_image(profile, channels, height, width,
                                      derive_seed(seed, 0x597f, i)));
    pool.labels.push_back(int(label_rng.next_u64() % num_classes));
  }
  return pool;
}

ImagePool synth_dataset(const BrightnessMixture& mixture, std::size_t count,
                        std::size_t channels, std::size_t height,
                        std::size_t width, std::uint64_t seed) {
  mixture.validate();
  double wsum = 0.0;
  for (double w : mixture.weights) wsum += w;

  ImagePool pool;
  pool.channels = channels;
  pool.height = height;
  pool.width = width;
  pool.images.reserve(count);
  pool.labels.reserve(count);
  Prng comp_rng(derive_seed(seed, 0xc03b));
  for (std::size_t i = 0; i < count; ++i) {
    double u = comp_rng.next_double() * wsum;
    std::size_t k = 0;
    while (k + 1 < mixture.weights.size() && u >= mixture.weights[k]) {
      u -= mixture.weights[k];
      ++k;
    }
    pool.images.push_back(synth_image(mixture.components[k], channels, height,
                                      width, derive_seed(seed, 0x597f, i)));
    pool.labels.push_back(int(k));
  }
  return pool;
}

std::vector<ImagePool> synth_noniid(
    const std::vector<BrightnessProfile>& client_profiles, std::size_t count,
    std::size_t channels, std::size_t height, std::size_t width,
    std::uint64_t seed, std::size_t num_classes) {
  std::vector<ImagePool> pools;
  pools.reserve(client_profiles.size());
  for (std::size_t c = 0; c < client_profiles.size(); ++c) {
    pools.push_back(synth_dataset(client_profiles[c], count, channels, height,
                                  width, derive_seed(seed, 0xc11e, c),
                                  num_classes));
  }
  return pools;
}

namespace {

unsigned char to_byte(double v) {
  v = std::clamp(v, 0.0, 1.0);
  return static_cast<unsigned char>(std::lround(v * 255.0));
}

void write_pnm(const double* data, std::size_t channels, std::size_t height,
               std::size_t width, const std::string& path) {
  if (channels != 1 && channels != 3)
    throw std::invalid_argument("write_image: channels must be 1 or 3, got " +
                                std::to_string(channels));
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << (channels == 1 ? "P5" : "P6") << "\n"
    << width << " " << height << "\n255\n";
  const std::size_t hw = height * width;
  std::vector<unsigned char> row(width * channels);
  for (std::size_t i = 0; i < height; ++i) {
    for (std::size_t j = 0; j < width; ++j) {
      for (std::size_t c = 0; c < channels; ++c)
        row[j * channels + c] =
            data ? to_byte(data[c * hw + i * width + j]) : 0;
    }
    f.write(reinterpret_cast<const char*>(row.data()),
            std::streamsize(row.size()));
  }
  if (!f) throw std::runtime_error("write failed for " + path);
}

}  // namespace

void write_image(const Tensor& image, const std::string& path) {
  if (image.rank() != 3)
    throw std::invalid_argument("write_image: image must be C x H x W, got " +
                                image.shape_str());
  write_pnm(image.data(), image.dim(0), image.dim(1), image.dim(2), path);
}

Tensor read_image(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  std::string magic;
  f >> magic;
  if (magic != "P5" && magic != "P6")
    throw std::runtime_error(path + ": unsupported magic " + magic);
  const std::size_t channels = magic == "P5" ? 1 : 3;
  std::size_t width = 0, height = 0, maxval = 0;
  f >> width >> height >> maxval;
  if (maxval != 255) throw std::runtime_error(path + ": expected maxval 255");
  f.get();  // single whitespace after header
  std::vector<unsigned char> buf(width * height * channels);
  if (!f.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size())))
    throw std::runtime_error(path + ": truncated pixel data");
  Tensor im({channels, height, width});
  const std::size_t hw = height * width;
  for (std::size_t i = 0; i < height; ++i)
    for (std::size_t j = 0; j < width; ++j)
      for (std::size_t c = 0; c < channels; ++c)
        im[c * hw + i * width + j] =
            double(buf[(i * width + j) * channels + c]) / 255.0;
  return im;
}

void write_image_grid(const std::vector<Tensor>& images, std::size_t cols,
                      std::size_t channels, std::size_t height,
                      std::size_t width, const std::string& path) {
  if (images.empty() || cols == 0)
    throw std::invalid_argument("write_image_grid: nothing to write");
  const std::size_t rows = (images.size() + cols - 1) / cols;
  const std::size_t gh = rows * height + (rows - 1);
  const std::size_t gw = cols * width + (cols - 1);
  Tensor grid({channels, gh, gw});
  for (std::size_t idx = 0; idx < images.size(); ++idx) {
    const Tensor& im = images[idx];
    if (im.empty()) continue;  // failure cell stays black
    if (im.dim(0) != channels || im.dim(1) != height || im.dim(2) != width)
      throw std::invalid_argument("write_image_grid: image " +
                                  std::to_string(idx) + " has shape " +
                                  im.shape_str());
    const std::size_t r0 = (idx / cols) * (height + 1);
    const std::size_t c0 = (idx % cols) * (width + 1);
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t i = 0; i < height; ++i)
        for (std::size_t j = 0; j < width; ++j)
          grid.at(c, r0 + i, c0 + j) = im.at(c, i, j);
  }
  write_image(grid, path);
}

}  // namespace fedleak
