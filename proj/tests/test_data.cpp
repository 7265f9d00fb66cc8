#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include <doctest.h>

#include "fedleak/data.hpp"
#include "fedleak/prng.hpp"
#include "support/test_support.hpp"

using namespace fedleak;

namespace {

std::string tmp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

void write_be32(std::ofstream& f, std::uint32_t v) {
  const unsigned char b[4] = {(unsigned char)(v >> 24), (unsigned char)(v >> 16),
                              (unsigned char)(v >> 8), (unsigned char)v};
  f.write(reinterpret_cast<const char*>(b), 4);
}

// Writes a tiny IDX image/label pair with seeded bytes.
void write_idx_pair(const std::string& images, const std::string& labels,
                    std::uint32_t n, std::uint32_t rows, std::uint32_t cols,
                    std::uint64_t seed) {
  std::ofstream im(images, std::ios::binary);
  write_be32(im, 2051);
  write_be32(im, n);
  write_be32(im, rows);
  write_be32(im, cols);
  Prng rng(seed);
  for (std::uint32_t i = 0; i < n * rows * cols; ++i) {
    const unsigned char byte = (unsigned char)(rng.next_u64() % 256);
    im.write(reinterpret_cast<const char*>(&byte), 1);
  }
  std::ofstream lb(labels, std::ios::binary);
  write_be32(lb, 2049);
  write_be32(lb, n);
  for (std::uint32_t i = 0; i < n; ++i) {
    const unsigned char byte = (unsigned char)(i % 10);
    lb.write(reinterpret_cast<const char*>(&byte), 1);
  }
}

}  // namespace

TEST_CASE("mnist idx loader") {
  const std::string im = tmp_path("fl_test_images.idx");
  const std::string lb = tmp_path("fl_test_labels.idx");
  write_idx_pair(im, lb, 12, 28, 28, 99);

  const ImagePool pool = load_mnist(im, lb);
  CHECK(pool.size() == 12);
  CHECK(pool.channels == 1);
  CHECK(pool.height == 28);
  CHECK(pool.width == 28);
  for (const Tensor& t : pool.images)
    for (std::size_t i = 0; i < t.size(); ++i) {
      CHECK(t[i] >= 0.0);
      CHECK(t[i] <= 1.0);
    }

  SUBCASE("first image matches an independent byte-level parser") {
    const auto oracle = testsup::idx_images_oracle(im);
    for (std::size_t i = 0; i < 28 * 28; ++i)
      CHECK(pool.images[0][i] == double(oracle[0][i]) / 255.0);
  }
  SUBCASE("byte 0 -> 0.0 and byte 255 -> 1.0") {
    const auto oracle = testsup::idx_images_oracle(im);
    bool saw0 = false, saw255 = false;
    for (std::size_t n = 0; n < oracle.size(); ++n)
      for (std::size_t i = 0; i < oracle[n].size(); ++i) {
        if (oracle[n][i] == 0) {
          CHECK(pool.images[n][i] == 0.0);
          saw0 = true;
        }
        if (oracle[n][i] == 255) {
          CHECK(pool.images[n][i] == 1.0);
          saw255 = true;
        }
      }
    CHECK(saw0);
    CHECK(saw255);
  }
  SUBCASE("bad magic is rejected") {
    const std::string bad = tmp_path("fl_test_badmagic.idx");
    std::ofstream f(bad, std::ios::binary);
    write_be32(f, 2052);
    write_be32(f, 1);
    write_be32(f, 2);
    write_be32(f, 2);
    f.close();
    CHECK_THROWS_WITH_AS(load_mnist(bad, lb), doctest::Contains("magic"),
                         std::runtime_error);
  }
  SUBCASE("count mismatch is rejected") {
    const std::string lb2 = tmp_path("fl_test_labels2.idx");
    std::ofstream f(lb2, std::ios::binary);
    write_be32(f, 2049);
    write_be32(f, 5);
    for (int i = 0; i < 5; ++i) f.put(char(i));
    f.close();
    CHECK_THROWS_WITH_AS(load_mnist(im, lb2), doctest::Contains("mismatch"),
                         std::runtime_error);
  }
}

TEST_CASE("cifar loader") {
  const std::string path = tmp_path("fl_test_cifar.bin");
  SUBCASE("cifar100 records keep the fine label, all-255 gives ones") {
    std::ofstream f(path, std::ios::binary);
    for (int rec = 0; rec < 3; ++rec) {
      f.put(char(rec));       // coarse
      f.put(char(10 + rec));  // fine
      for (int i = 0; i < 3072; ++i) f.put(char(rec == 1 ? 255 : 7));
    }
    f.close();
    const ImagePool pool = load_cifar({path}, CifarVariant::cifar100);
    CHECK(pool.size() == 3);
    CHECK(pool.labels[0] == 10);
    CHECK(pool.labels[2] == 12);
    for (std::size_t i = 0; i < pool.images[1].size(); ++i)
      CHECK(pool.images[1][i] == 1.0);
  }
  SUBCASE("size not a multiple of the record is rejected") {
    std::ofstream f(path, std::ios::binary);
    for (int i = 0; i < 3074 + 5; ++i) f.put(char(i));
    f.close();
    CHECK_THROWS_WITH_AS(load_cifar({path}, CifarVariant::cifar100),
                         doctest::Contains("record"), std::runtime_error);
  }
  SUBCASE("random valid files load into [0,1]") {
    Prng rng(404);
    std::ofstream f(path, std::ios::binary);
    for (int rec = 0; rec < 8; ++rec) {
      f.put(char(rng.next_u64() % 10));
      for (int i = 0; i < 3072; ++i) f.put(char(rng.next_u64() % 256));
    }
    f.close();
    const ImagePool pool = load_cifar({path}, CifarVariant::cifar10);
    for (const Tensor& im : pool.images)
      for (std::size_t i = 0; i < im.size(); ++i) {
        CHECK(im[i] >= 0.0);
        CHECK(im[i] <= 1.0);
      }
  }
}

TEST_CASE("real CIFAR brightness histogram is unimodal with its bulk between "
          "0.3 and 0.7 per-channel mean (needs FEDLEAK_CIFAR_PATH)") {
  const char* env = std::getenv("FEDLEAK_CIFAR_PATH");
  if (!env) return;  // dataset files are optional; skip silently
  const ImagePool pool = load_cifar({env}, CifarVariant::cifar100);
  std::size_t in_bulk = 0;
  std::vector<std::size_t> hist(20, 0);
  for (const Tensor& im : pool.images) {
    const double per_channel_mean = summed_channel_mean(im) / 3.0;
    in_bulk += (per_channel_mean >= 0.3 && per_channel_mean <= 0.7);
    hist[std::min<std::size_t>(19, std::size_t(per_channel_mean * 20))] += 1;
  }
  CHECK(double(in_bulk) / double(pool.size()) > 0.6);
  // Unimodal up to small wiggles: a single dominant peak bin.
  const std::size_t peak =
      std::size_t(std::max_element(hist.begin(), hist.end()) - hist.begin());
  CHECK(peak >= 6);   // peak inside the central range
  CHECK(peak <= 13);
}

TEST_CASE("synthetic generator hits brightness targets") {
  SUBCASE("sd 0 pins the summed-channel mean exactly") {
    const ImagePool pool = synth_dataset({1.5, 0.0}, 20, 3, 8, 8, 17);
    for (const Tensor& im : pool.images)
      CHECK(summed_channel_mean(im) == doctest::Approx(1.5).epsilon(1e-9));
  }
  SUBCASE("law of large numbers at mean 1.5 sd 0.5") {
    const ImagePool pool = synth_dataset({1.5, 0.5}, 10000, 3, 8, 8, 29);
    double m = 0.0;
    std::vector<double> hs;
    for (const Tensor& im : pool.images) {
      hs.push_back(summed_channel_mean(im));
      m += hs.back();
    }
    m /= double(hs.size());
    double var = 0.0;
    for (double h : hs) var += (h - m) * (h - m);
    const double sd = std::sqrt(var / double(hs.size()));
    CHECK(std::fabs(m - 1.5) < 0.02);
    CHECK(std::fabs(sd - 0.5) < 0.02);
  }
  SUBCASE("pixels stay in [0,1] across extreme targets") {
    for (double mean : {0.05, 0.5, 2.95}) {
      const ImagePool pool = synth_dataset({mean, 0.3}, 50, 3, 6, 6, 31);
      for (const Tensor& im : pool.images)
        for (std::size_t i = 0; i < im.size(); ++i) {
          CHECK(im[i] >= 0.0);
          CHECK(im[i] <= 1.0);
        }
    }
  }
  SUBCASE("two clients with distant means differ in brightness") {
    const auto pools = synth_noniid({{0.3, 0.05}, {0.9, 0.05}}, 200, 1, 8, 8, 5);
    double m0 = 0, m1 = 0;
    for (const Tensor& im : pools[0].images) m0 += summed_channel_mean(im);
    for (const Tensor& im : pools[1].images) m1 += summed_channel_mean(im);
    CHECK(m1 / 200 - m0 / 200 > 0.4);
  }
}

TEST_CASE("synth_noniid with identical profiles is indistinguishable from "
          "the IID generator (two-sample KS below 0.05 at n=5000)") {
  const BrightnessProfile p{1.2, 0.4};
  const ImagePool iid = synth_dataset(p, 5000, 3, 4, 4, 111);
  const auto pools = synth_noniid({p}, 5000, 3, 4, 4, 222);
  std::vector<double> a, b;
  for (const Tensor& im : iid.images) a.push_back(summed_channel_mean(im));
  for (const Tensor& im : pools[0].images) b.push_back(summed_channel_mean(im));
  CHECK(testsup::ks_statistic(a, b) < 0.05);
}

TEST_CASE("write_image emits exact PNM bytes and round-trips") {
  SUBCASE("1x1x1 value 1.0 writes body byte 255") {
    Tensor im({1, 1, 1});
    im[0] = 1.0;
    const std::string path = tmp_path("fl_test_one.pgm");
    write_image(im, path);
    std::size_t w, h, c;
    const auto bytes = testsup::pnm_bytes_oracle(path, w, h, c);
    REQUIRE(bytes.size() == 1);
    CHECK(bytes[0] == 255);
  }
  SUBCASE("3x2x2 header is exactly P6\\n2 2\\n255\\n plus 12 payload bytes") {
    Tensor im({3, 2, 2});
    for (std::size_t i = 0; i < im.size(); ++i) im[i] = double(i) / 11.0;
    const std::string path = tmp_path("fl_test_rgb.ppm");
    write_image(im, path);
    std::ifstream f(path, std::ios::binary);
    std::string contents((std::istreambuf_iterator<char>(f)),
                         std::istreambuf_iterator<char>());
    const std::string header = "P6\n2 2\n255\n";
    REQUIRE(contents.size() == header.size() + 12);
    CHECK(contents.substr(0, header.size()) == header);
    // Payload is RGB-interleaved row-major.
    const std::size_t hw = 4;
    for (std::size_t px = 0; px < hw; ++px)
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const unsigned char want =
            (unsigned char)std::lround(im[ch * hw + px] * 255.0);
        CHECK((unsigned char)contents[header.size() + px * 3 + ch] == want);
      }
  }
  SUBCASE("write then read recovers pixels within quantization") {
    const Tensor im = testsup::make_random_image(8, 3, 5, 7, 0.0, 1.0);
    const std::string path = tmp_path("fl_test_rt.ppm");
    write_image(im, path);
    const Tensor back = read_image(path);
    REQUIRE(back.shape() == im.shape());
    for (std::size_t i = 0; i < im.size(); ++i)
      CHECK(std::fabs(back[i] - im[i]) <= 0.5 / 255.0 + 1e-12);
  }
  SUBCASE("2-channel images are rejected") {
    Tensor im({2, 2, 2});
    CHECK_THROWS_AS(write_image(im, tmp_path("fl_test_bad.pgm")),
                    std::invalid_argument);
  }
}
