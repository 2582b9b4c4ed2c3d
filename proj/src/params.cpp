#include "vton/params.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>

#include <openssl/evp.h>

#include "vton/errors.hpp"

namespace vton {

static_assert(std::endian::native == std::endian::little, "container IO assumes a little-endian host");

void init_trunc_normal(Mat& m, double stddev, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    double v = normal(rng);
    while (std::abs(v) > 2.0) v = normal(rng);
    m.data()[i] = v * stddev;
  }
}

namespace {

constexpr char kMagic[8] = {'V', 'T', 'O', 'N', 'A', 'R', 'R', '1'};

void put_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }

std::uint32_t get_u32(std::istream& is) {
  std::uint32_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), 4)) throw IoError("truncated array container");
  return v;
}

std::filesystem::path sidecar(const std::filesystem::path& file) {
  return std::filesystem::path(file.string() + ".json");
}

}  // namespace

void save_arrays(const ParamStore& params, const std::filesystem::path& file, nlohmann::json meta) {
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  std::ofstream os(file, std::ios::binary);
  if (!os) throw IoError("cannot write " + file.string());
  os.write(kMagic, sizeof(kMagic));
  put_u32(os, kContainerVersion);
  put_u32(os, static_cast<std::uint32_t>(params.size()));
  nlohmann::json shapes = nlohmann::json::object();
  for (const std::string& name : params.names()) {
    const Mat& m = params.value(name);
    put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(os, static_cast<std::uint32_t>(m.rows()));
    put_u32(os, static_cast<std::uint32_t>(m.cols()));
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) {
        const float f = static_cast<float>(m(r, c));
        os.write(reinterpret_cast<const char*>(&f), sizeof(f));
      }
    }
    shapes[name] = {m.rows(), m.cols()};
  }
  if (!os) throw IoError("write failed for " + file.string());
  meta["format_version"] = kContainerVersion;
  meta["arrays"] = shapes;
  std::ofstream js(sidecar(file));
  js << meta.dump(2) << "\n";
  if (!js) throw IoError("cannot write sidecar for " + file.string());
}

ArrayContainer load_arrays(const std::filesystem::path& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw IoError("cannot open " + file.string());
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) throw IoError(file.string() + ": bad magic");
  const std::uint32_t version = get_u32(is);
  if (version != kContainerVersion) {
    throw IoError(file.string() + ": unsupported container version " + std::to_string(version));
  }
  ArrayContainer out;
  const std::uint32_t count = get_u32(is);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name(get_u32(is), '\0');
    if (!is.read(name.data(), static_cast<std::streamsize>(name.size()))) throw IoError("truncated array name");
    const std::uint32_t rows = get_u32(is), cols = get_u32(is);
    Mat m(rows, cols);
    for (std::uint32_t r = 0; r < rows; ++r) {
      for (std::uint32_t c = 0; c < cols; ++c) {
        float f = 0.0f;
        if (!is.read(reinterpret_cast<char*>(&f), sizeof(f))) throw IoError("truncated array data");
        m(r, c) = f;
      }
    }
    out.arrays.emplace(std::move(name), std::move(m));
  }
  std::ifstream js(sidecar(file));
  if (!js) throw IoError("missing metadata sidecar for " + file.string());
  try {
    js >> out.meta;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed sidecar for " + file.string() + ": " + e.what());
  }
  if (out.meta.value("format_version", 0u) != kContainerVersion) {
    throw IoError(file.string() + ": sidecar format_version mismatch");
  }
  return out;
}

void assign_checked(ParamStore& dst, const std::map<std::string, Mat>& src) {
  if (src.size() != dst.size()) {
    throw ShapeError("checkpoint has " + std::to_string(src.size()) + " arrays, model expects " +
                     std::to_string(dst.size()));
  }
  for (const auto& [name, m] : src) {
    if (!dst.contains(name)) throw ShapeError("checkpoint array '" + name + "' not in model");
    Mat& target = dst.value(name);
    if (target.rows() != m.rows() || target.cols() != m.cols()) {
      throw ShapeError("checkpoint array '" + name + "' has shape " + std::to_string(m.rows()) + "x" +
                       std::to_string(m.cols()) + ", config expects " + std::to_string(target.rows()) + "x" +
                       std::to_string(target.cols()));
    }
    if (!m.allFinite()) throw NumericalError("checkpoint array '" + name + "' is not finite");
    target = m;
  }
}

void ema_update(ParamStore& teacher, const ParamStore& student, double lambda) {
  if (lambda < 0.0 || lambda > 1.0) throw ConfigError("ema lambda must lie in [0,1]");
  if (teacher.size() != student.size()) throw ShapeError("ema_update: parameter sets differ");
  for (const std::string& name : teacher.names()) {
    if (!student.contains(name)) throw ShapeError("ema_update: student lacks '" + name + "'");
    Mat& t = teacher.value(name);
    const Mat& s = student.value(name);
    if (t.rows() != s.rows() || t.cols() != s.cols()) throw ShapeError("ema_update: shape mismatch at " + name);
    if (lambda == 1.0) continue;
    if (lambda == 0.0) {
      t = s;
      continue;
    }
    t = lambda * t + (1.0 - lambda) * s;
  }
}

void AdamW::step(ParamStore& params, double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (const std::string& name : params.names()) {
    Mat& w = params.value(name);
    const Mat& g = params.grad(name);
    auto [it, inserted] = moments_.try_emplace(name, Mat::Zero(w.rows(), w.cols()), Mat::Zero(w.rows(), w.cols()));
    auto& [m, v] = it->second;
    m = beta1_ * m + (1.0 - beta1_) * g;
    v = beta2_ * v + (1.0 - beta2_) * g.cwiseProduct(g);
    if (w.rows() > 1 && weight_decay_ > 0.0) w *= (1.0 - lr * weight_decay_);
    w.array() -= lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + eps_);
  }
}

double cosine_schedule(double start, double end, double progress) {
  progress = std::clamp(progress, 0.0, 1.0);
  return end + (start - end) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

std::string git_blob_hash(std::string_view bytes) {
  const std::string header = "blob " + std::to_string(bytes.size()) + std::string(1, '\0');
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr);
  EVP_DigestUpdate(ctx, header.data(), header.size());
  EVP_DigestUpdate(ctx, bytes.data(), bytes.size());
  EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += kHex[digest[i] >> 4];
    out += kHex[digest[i] & 0xF];
  }
  return out;
}

std::string git_blob_hash_file(const std::filesystem::path& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw IoError("cannot hash " + file.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return git_blob_hash(ss.str());
}

}  // namespace vton
