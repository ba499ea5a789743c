#include "dmad/data.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iterator>
#include <sstream>

#include "dmad/checkpoint.hpp"

namespace dmad {

namespace {

constexpr float kBackgroundX = -0.8f;
constexpr float kNoiseAmplitude = 0.1f;
constexpr float kOutline = 1.0f;
constexpr float kBackgroundY = -0.9f;

std::array<float, 3> class_colour(ShapeClass k) {
  switch (k) {
    case ShapeClass::Circle: return {0.8f, -0.6f, -0.6f};
    case ShapeClass::Square: return {-0.6f, 0.8f, -0.6f};
    case ShapeClass::Triangle: return {-0.6f, -0.6f, 0.8f};
  }
  return {0.f, 0.f, 0.f};
}

double edge(double ax, double ay, double bx, double by, double px, double py) {
  return (bx - ax) * (py - ay) - (by - ay) * (px - ax);
}

std::vector<std::uint8_t> inside_mask(const ShapeInstance& s) {
  std::vector<std::uint8_t> m(std::size_t(kImageSize) * kImageSize);
  for (int y = 0; y < kImageSize; ++y)
    for (int x = 0; x < kImageSize; ++x) m[y * kImageSize + x] = shape_contains(s, x + 0.5, y + 0.5);
  return m;
}

bool is_outline(const std::vector<std::uint8_t>& inside, int x, int y) {
  if (!inside[y * kImageSize + x]) return false;
  constexpr int dx[] = {1, -1, 0, 0};
  constexpr int dy[] = {0, 0, 1, -1};
  for (int k = 0; k < 4; ++k) {
    const int nx = x + dx[k], ny = y + dy[k];
    if (nx < 0 || ny < 0 || nx >= kImageSize || ny >= kImageSize) return true;
    if (!inside[ny * kImageSize + nx]) return true;
  }
  return false;
}

Image blank(float fill) {
  Image img;
  img.data.assign(kImageNumel, fill);
  return img;
}

std::uint8_t to_byte(float v) {
  const double b = std::round((std::clamp(double(v), -1.0, 1.0) + 1.0) * 127.5);
  return static_cast<std::uint8_t>(std::clamp(b, 0.0, 255.0));
}

}  // namespace

bool shape_contains(const ShapeInstance& s, double px, double py) {
  const double dx = px - s.cx, dy = py - s.cy;
  switch (s.kind) {
    case ShapeClass::Circle: return dx * dx + dy * dy <= s.size * s.size;
    case ShapeClass::Square: return std::abs(dx) <= s.size && std::abs(dy) <= s.size;
    case ShapeClass::Triangle: {
      const double ax = s.cx, ay = s.cy - s.size;
      const double bx = s.cx - s.size, by = s.cy + s.size;
      const double cx = s.cx + s.size, cy = s.cy + s.size;
      const double e1 = edge(ax, ay, bx, by, px, py);
      const double e2 = edge(bx, by, cx, cy, px, py);
      const double e3 = edge(cx, cy, ax, ay, px, py);
      return (e1 >= 0 && e2 >= 0 && e3 >= 0) || (e1 <= 0 && e2 <= 0 && e3 <= 0);
    }
  }
  return false;
}

SamplePair generate_sample(std::uint64_t seed, std::uint64_t id) {
  Rng rng = Rng(seed).split("dataset").split(id);
  SamplePair s;
  s.id = id;
  const int count = static_cast<int>(rng.uniform_int(1, 3));
  for (int i = 0; i < count; ++i) {
    ShapeInstance sh;
    sh.kind = static_cast<ShapeClass>(rng.uniform_int(0, 2));
    sh.size = rng.uniform(5.0, 10.0);
    sh.cx = rng.uniform(sh.size + 1.0, kImageSize - sh.size - 1.0);
    sh.cy = rng.uniform(sh.size + 1.0, kImageSize - sh.size - 1.0);
    s.shapes.push_back(sh);
  }
  s.x = blank(kBackgroundX);
  for (auto& v : s.x.data) v += static_cast<float>(rng.uniform(-kNoiseAmplitude, kNoiseAmplitude));
  s.y = blank(kBackgroundY);
  for (const auto& sh : s.shapes) {
    const auto inside = inside_mask(sh);
    const auto colour = class_colour(sh.kind);
    for (int y = 0; y < kImageSize; ++y) {
      for (int x = 0; x < kImageSize; ++x) {
        if (is_outline(inside, x, y))
          for (int c = 0; c < kImageChannels; ++c) s.x.at(c, y, x) = kOutline;
        if (inside[y * kImageSize + x])
          for (int c = 0; c < kImageChannels; ++c) s.y.at(c, y, x) = colour[c];
      }
    }
  }
  for (auto& v : s.x.data) v = std::clamp(v, -1.0f, 1.0f);
  return s;
}

Dataset generate_dataset(std::uint64_t seed, int n_train, int n_test) {
  if (n_train < 1 || n_test < 1) throw ConfigError("dataset splits need at least one sample each");
  Dataset d;
  for (int i = 0; i < n_train; ++i) d.train.push_back(generate_sample(seed, i));
  for (int i = 0; i < n_test; ++i) d.test.push_back(generate_sample(seed, std::uint64_t(n_train) + i));
  return d;
}

Tensor<float> stack_images(const std::vector<const Image*>& images) {
  if (images.empty()) throw ShapeError("stack_images: empty batch");
  const auto& f = *images.front();
  std::vector<float> out;
  out.reserve(images.size() * f.data.size());
  for (const auto* img : images) {
    if (img->channels != f.channels || img->height != f.height || img->width != f.width) {
      throw ShapeError("stack_images: mixed image sizes");
    }
    out.insert(out.end(), img->data.begin(), img->data.end());
  }
  return Tensor<float>({static_cast<int>(images.size()), f.channels, f.height, f.width}, std::move(out));
}

std::vector<Image> unstack_images(const Tensor<float>& batch) {
  if (batch.rank() != 4) throw ShapeError("unstack_images expects NCHW");
  std::vector<Image> out(batch.dim(0));
  const std::size_t n = std::size_t(batch.dim(1)) * batch.dim(2) * batch.dim(3);
  for (int i = 0; i < batch.dim(0); ++i) {
    out[i].channels = batch.dim(1);
    out[i].height = batch.dim(2);
    out[i].width = batch.dim(3);
    out[i].data.assign(batch.data().begin() + i * n, batch.data().begin() + (i + 1) * n);
  }
  return out;
}

void save_split(const std::vector<SamplePair>& split, const std::filesystem::path& path) {
  Checkpoint ckpt;
  std::vector<float> xs, ys, ids;
  for (const auto& s : split) {
    xs.insert(xs.end(), s.x.data.begin(), s.x.data.end());
    ys.insert(ys.end(), s.y.data.begin(), s.y.data.end());
    ids.push_back(static_cast<float>(s.id));
  }
  const auto n = static_cast<std::uint32_t>(split.size());
  ckpt.put("x", {n, kImageChannels, kImageSize, kImageSize}, std::move(xs));
  ckpt.put("y", {n, kImageChannels, kImageSize, kImageSize}, std::move(ys));
  ckpt.put("ids", {n}, std::move(ids));
  ckpt.save(path);
}

std::vector<SamplePair> load_split(const std::filesystem::path& path) {
  const auto ckpt = Checkpoint::load(path);
  const auto& x = ckpt.at("x");
  const auto& y = ckpt.at("y");
  const auto& ids = ckpt.at("ids");
  if (x.dims.size() != 4 || x.dims != y.dims || ids.values.size() != x.dims[0]) {
    throw FormatError("dataset split " + path.string() + " has inconsistent entries");
  }
  std::vector<SamplePair> out(x.dims[0]);
  const std::size_t n = std::size_t(x.dims[1]) * x.dims[2] * x.dims[3];
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i].id = static_cast<std::uint64_t>(ids.values[i]);
    for (Image* img : {&out[i].x, &out[i].y}) {
      img->channels = static_cast<int>(x.dims[1]);
      img->height = static_cast<int>(x.dims[2]);
      img->width = static_cast<int>(x.dims[3]);
    }
    out[i].x.data.assign(x.values.begin() + i * n, x.values.begin() + (i + 1) * n);
    out[i].y.data.assign(y.values.begin() + i * n, y.values.begin() + (i + 1) * n);
  }
  return out;
}

std::vector<std::uint8_t> encode_ppm(const Image& image) {
  if (image.channels != 3) throw FormatError("PPM needs a 3-channel image");
  const std::string header = "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x)
      for (int c = 0; c < 3; ++c) out.push_back(to_byte(image.at(c, y, x)));
  return out;
}

Image decode_ppm(const std::vector<std::uint8_t>& bytes) {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto token = [&] {
    skip_space();
    std::string t;
    while (pos < bytes.size() && !std::isspace(bytes[pos]) && bytes[pos] != '#') t.push_back(char(bytes[pos++]));
    if (t.empty()) throw FormatError("PPM header truncated");
    return t;
  };
  auto number = [&] {
    const auto t = token();
    if (!std::all_of(t.begin(), t.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); })) {
      throw FormatError("PPM header has non-numeric field '" + t + "'");
    }
    return std::stoi(t);
  };
  if (token() != "P6") throw FormatError("not a binary PPM (P6)");
  const int w = number(), h = number(), maxval = number();
  if (w < 1 || h < 1) throw FormatError("PPM with empty extent");
  if (maxval != 255) throw FormatError("only 8-bit PPM is supported");
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw FormatError("PPM header not terminated");
  ++pos;
  const std::size_t need = std::size_t(w) * h * 3;
  if (bytes.size() - pos != need) throw FormatError("PPM pixel data has wrong length");
  Image img;
  img.channels = 3;
  img.width = w;
  img.height = h;
  img.data.assign(need, 0.f);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) img.at(c, y, x) = static_cast<float>(bytes[pos++] / 127.5 - 1.0);
  return img;
}

void write_ppm(const Image& image, const std::filesystem::path& path) {
  const auto bytes = encode_ppm(image);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Image read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_ppm(bytes);
}

Image image_grid(const std::vector<Image>& images, int rows, int cols) {
  if (images.empty() || rows < 1 || cols < 1 || int(images.size()) > rows * cols) {
    throw ShapeError("image_grid: bad tiling");
  }
  const auto& f = images.front();
  Image out;
  out.channels = f.channels;
  out.height = f.height * rows;
  out.width = f.width * cols;
  out.data.assign(std::size_t(out.channels) * out.height * out.width, -1.0f);
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto& img = images[i];
    if (img.channels != f.channels || img.height != f.height || img.width != f.width) {
      throw ShapeError("image_grid: mixed image sizes");
    }
    const int oy = int(i) / cols * f.height, ox = int(i) % cols * f.width;
    for (int c = 0; c < f.channels; ++c)
      for (int y = 0; y < f.height; ++y)
        for (int x = 0; x < f.width; ++x) out.at(c, oy + y, ox + x) = img.at(c, y, x);
  }
  return out;
}

Eigen::VectorXd frechet_features(const Image& image) {
  constexpr int grid = 8;
  if (image.height % grid || image.width % grid) throw ShapeError("frechet features need sizes divisible by 8");
  const int bh = image.height / grid, bw = image.width / grid;
  Eigen::VectorXd f = Eigen::VectorXd::Zero(grid * grid);
  for (int c = 0; c < image.channels; ++c)
    for (int y = 0; y < image.height; ++y)
      for (int x = 0; x < image.width; ++x) f[(y / bh) * grid + x / bw] += image.at(c, y, x);
  f /= double(image.channels) * bh * bw;
  return f;
}

GaussianSummary fit_gaussian(const Eigen::MatrixXd& features) {
  if (features.rows() < 1) throw DataError("fit_gaussian: no samples");
  GaussianSummary g;
  g.mean = features.colwise().mean().transpose();
  const Eigen::MatrixXd centred = features.rowwise() - g.mean.transpose();
  const double denom = features.rows() > 1 ? double(features.rows() - 1) : 1.0;
  g.covariance = (centred.transpose() * centred) / denom;
  g.covariance.diagonal().array() += 1e-6;
  if (!g.covariance.allFinite() || !g.mean.allFinite()) throw DataError("fit_gaussian: non-finite statistics");
  return g;
}

Eigen::MatrixXd symmetric_sqrt(const Eigen::MatrixXd& m) {
  const Eigen::MatrixXd sym = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
  if (es.info() != Eigen::Success) throw DataError("eigendecomposition failed");
  const Eigen::VectorXd roots = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * roots.asDiagonal() * es.eigenvectors().transpose();
}

double frechet_distance(const GaussianSummary& a, const GaussianSummary& b) {
  if (a.mean.size() != b.mean.size()) throw DataError("frechet_distance: dimension mismatch");
  if (!a.covariance.allFinite() || !b.covariance.allFinite()) throw DataError("frechet_distance: non-finite covariance");
  const Eigen::MatrixXd root_a = symmetric_sqrt(a.covariance);
  const Eigen::MatrixXd inner = root_a * b.covariance * root_a;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
  if (es.info() != Eigen::Success) throw DataError("eigendecomposition failed");
  const double trace_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double d = (a.mean - b.mean).squaredNorm() + a.covariance.trace() + b.covariance.trace() - 2.0 * trace_sqrt;
  return std::max(0.0, d);
}

double toy_frechet(const std::vector<Image>& a, const std::vector<Image>& b) {
  auto features = [](const std::vector<Image>& set) {
    Eigen::MatrixXd f(set.size(), 64);
    for (std::size_t i = 0; i < set.size(); ++i) f.row(i) = frechet_features(set[i]).transpose();
    return f;
  };
  return frechet_distance(fit_gaussian(features(a)), fit_gaussian(features(b)));
}

double mean_abs_error(const std::vector<Image>& a, const std::vector<Image>& b) {
  if (a.size() != b.size() || a.empty()) throw ShapeError("mean_abs_error: set sizes differ");
  double acc = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].data.size() != b[i].data.size()) throw ShapeError("mean_abs_error: image sizes differ");
    for (std::size_t k = 0; k < a[i].data.size(); ++k) acc += std::abs(double(a[i].data[k]) - b[i].data[k]);
    n += a[i].data.size();
  }
  return acc / double(n);
}

}  // namespace dmad
