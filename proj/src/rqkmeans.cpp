#include "onerec/rqkmeans.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <limits>
#include <map>
#include <unordered_map>

#include "binary_io.hpp"
#include "onerec/kernels.hpp"

namespace onerec::rq {

namespace {

constexpr std::string_view kBegin = "<|item_begin|>";
constexpr std::string_view kEnd = "<|item_end|>";
constexpr std::string_view kMagic = "RQKM1";
constexpr std::int64_t kMaxFsqCodeSpace = std::int64_t{1} << 24;

MatF kmeanspp_init(const MatF& points, int k, Rng& rng) {
  const int n = points.rows;
  const int d = points.cols;
  MatF centroids(k, d);
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  int chosen = static_cast<int>(rng() % static_cast<std::uint64_t>(n));
  for (int c = 0; c < k; ++c) {
    std::copy_n(points.row(chosen).data(), d, centroids.row(c).data());
    if (c + 1 == k) break;
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], kernels::ref::squared_distance(points.row(i).data(), centroids.row(c).data(), d));
      total += d2[i];
    }
    if (total <= 0.0) {
      chosen = static_cast<int>(rng() % static_cast<std::uint64_t>(n));
      continue;
    }
    const double target = uniform01(rng) * total;
    double acc = 0.0;
    chosen = n - 1;
    for (int i = 0; i < n; ++i) {
      acc += d2[i];
      if (acc > target && d2[i] > 0.0) {
        chosen = i;
        break;
      }
    }
  }
  return centroids;
}

}  // namespace

std::size_t ItemicCodeHash::operator()(const ItemicCode& c) const noexcept {
  std::size_t h = 1469598103934665603ULL;
  for (int v : c.codes) h = (h ^ static_cast<std::size_t>(v)) * 1099511628211ULL;
  return h;
}

std::int64_t FsqExtension::code_space() const {
  std::int64_t s = 1;
  for (int k = 0; k < dims(); ++k) s *= levels_per_dim;
  return s;
}

std::vector<std::int64_t> TokenizerModel::level_sizes() const {
  std::vector<std::int64_t> out;
  for (const auto& cb : codebooks) out.push_back(cb.size());
  if (fsq) out.push_back(fsq->code_space());
  return out;
}

char level_letter(int level) { return static_cast<char>('a' + level); }

namespace {

KMeansResult lloyd(const MatF& points, int k, std::uint64_t seed, const KMeansOptions& opts) {
  const int n = points.rows;
  const int d = points.cols;
  if (k < 1) throw FitError("kmeans: k must be >= 1");
  if (n < k) {
    throw FitError("kmeans: " + std::to_string(n) + " points cannot support " + std::to_string(k) + " centroids");
  }
  Rng rng(seed);
  KMeansResult res;
  res.centroids = kmeanspp_init(points, k, rng);
  res.assignment.assign(n, 0);
  std::vector<double> d2(n);
  std::vector<double> sums(static_cast<std::size_t>(k) * d);
  std::vector<int> counts(k);

  double prev = std::numeric_limits<double>::infinity();
  for (int it = 0; it < opts.max_iter; ++it) {
    kernels::nearest_centroid(points.data.data(), n, res.centroids.data.data(), k, d, res.assignment.data(),
                              d2.data());
    double obj = 0.0;
    for (double v : d2) obj += v;

    std::fill(sums.begin(), sums.end(), 0.0);
    std::fill(counts.begin(), counts.end(), 0);
    for (int i = 0; i < n; ++i) {
      const int c = res.assignment[i];
      ++counts[c];
      double* s = sums.data() + static_cast<std::size_t>(c) * d;
      const float* p = points.row(i).data();
      for (int j = 0; j < d; ++j) s[j] += p[j];
    }
    for (int c = 0; c < k; ++c) {
      auto row = res.centroids.row(c);
      if (counts[c] > 0) {
        const double* s = sums.data() + static_cast<std::size_t>(c) * d;
        for (int j = 0; j < d; ++j) row[j] = static_cast<float>(s[j] / counts[c]);
      } else {
        const auto far = static_cast<int>(std::max_element(d2.begin(), d2.end()) - d2.begin());
        std::copy_n(points.row(far).data(), d, row.data());
        d2[far] = 0.0;
      }
    }
    res.iterations = it + 1;
    if (std::isfinite(prev) && (prev - obj) <= opts.rel_tol * prev) break;
    prev = obj;
  }
  kernels::nearest_centroid(points.data.data(), n, res.centroids.data.data(), k, d, res.assignment.data(), d2.data());
  res.objective = 0.0;
  for (double v : d2) res.objective += v;
  return res;
}

}  // namespace

KMeansResult kmeans(const MatF& points, int k, std::uint64_t seed, const KMeansOptions& opts) {
  if (opts.restarts < 1) throw ConfigError("kmeans: restarts must be >= 1");
  KMeansResult best = lloyd(points, k, mix_seed(seed, 0), opts);
  for (int r = 1; r < opts.restarts; ++r) {
    KMeansResult cand = lloyd(points, k, mix_seed(seed, r), opts);
    if (cand.objective < best.objective) best = std::move(cand);
  }
  return best;
}

TokenizerModel fit_tokenizer(const MatF& embeddings, std::span<const int> level_sizes, std::uint64_t seed,
                             const KMeansOptions& opts) {
  if (level_sizes.empty()) throw FitError("fit_tokenizer: at least one level required");
  const int max_k = *std::max_element(level_sizes.begin(), level_sizes.end());
  if (embeddings.rows < max_k) {
    throw FitError("fit_tokenizer: " + std::to_string(embeddings.rows) + " embeddings for codebook size " +
                   std::to_string(max_k));
  }
  TokenizerModel model;
  model.d_emb = embeddings.cols;
  MatF residual = embeddings;
  for (std::size_t l = 0; l < level_sizes.size(); ++l) {
    KMeansResult km = kmeans(residual, level_sizes[l], mix_seed(seed, l), opts);
    for (int i = 0; i < residual.rows; ++i) {
      auto r = residual.row(i);
      auto c = km.centroids.row(km.assignment[i]);
      for (int j = 0; j < residual.cols; ++j) r[j] -= c[j];
    }
    model.codebooks.push_back(Codebook{static_cast<int>(l), std::move(km.centroids)});
  }
  return model;
}

namespace {

void check_embedding(const TokenizerModel& model, std::span<const float> x) {
  if (static_cast<int>(x.size()) != model.d_emb) {
    throw InputError("embedding dimension " + std::to_string(x.size()) + " != " + std::to_string(model.d_emb));
  }
  for (float v : x) {
    if (!std::isfinite(v)) throw InputError("non-finite embedding value");
  }
}

// Greedy residual pass over the codebooks; leaves the final residual in `r`.
void encode_codebooks(const TokenizerModel& model, std::vector<float>& r, std::vector<int>& codes) {
  const int d = model.d_emb;
  for (const auto& cb : model.codebooks) {
    int arg = 0;
    double dist = 0.0;
    kernels::ref::nearest_centroid(r.data(), 1, cb.centroids.data.data(), cb.size(), d, &arg, &dist);
    codes.push_back(arg);
    auto c = cb.centroids.row(arg);
    for (int j = 0; j < d; ++j) r[j] -= c[j];
  }
}

int fsq_bin(double y, double bound, int levels) {
  const double t = (y + bound) / (2.0 * bound) * levels;
  const auto b = static_cast<int>(std::floor(t));
  return std::clamp(b, 0, levels - 1);
}

std::int64_t fsq_encode(const FsqExtension& fsq, std::span<const float> residual) {
  std::int64_t code = 0;
  for (int k = 0; k < fsq.dims(); ++k) {
    double y = 0.0;
    auto p = fsq.projection.row(k);
    for (std::size_t j = 0; j < residual.size(); ++j) y += p[j] * residual[j];
    code = code * fsq.levels_per_dim + fsq_bin(y, fsq.bounds[k], fsq.levels_per_dim);
  }
  return code;
}

}  // namespace

ItemicCode encode(const TokenizerModel& model, std::span<const float> embedding) {
  check_embedding(model, embedding);
  std::vector<float> r(embedding.begin(), embedding.end());
  ItemicCode out;
  encode_codebooks(model, r, out.codes);
  if (model.fsq) out.codes.push_back(static_cast<int>(fsq_encode(*model.fsq, r)));
  return out;
}

std::vector<ItemicCode> encode_all(const TokenizerModel& model, const MatF& embeddings) {
  std::vector<ItemicCode> out(embeddings.rows);
#pragma omp parallel for schedule(static)
  for (int i = 0; i < embeddings.rows; ++i) out[i] = encode(model, embeddings.row(i));
  return out;
}

std::vector<double> decode(const TokenizerModel& model, const ItemicCode& code) {
  if (static_cast<int>(code.size()) != model.levels()) {
    throw IndexError("code has " + std::to_string(code.size()) + " levels, tokenizer has " +
                     std::to_string(model.levels()));
  }
  std::vector<double> x(model.d_emb, 0.0);
  for (std::size_t l = 0; l < model.codebooks.size(); ++l) {
    const auto& cb = model.codebooks[l];
    if (code[l] < 0 || code[l] >= cb.size()) {
      throw IndexError("code " + std::to_string(code[l]) + " out of range at level " + std::to_string(l));
    }
    auto c = cb.centroids.row(code[l]);
    for (int j = 0; j < model.d_emb; ++j) x[j] += c[j];
  }
  if (model.fsq) {
    const auto& fsq = *model.fsq;
    std::int64_t v = code.codes.back();
    if (v < 0 || v >= fsq.code_space()) throw IndexError("FSQ code " + std::to_string(v) + " out of range");
    const int levels = fsq.levels_per_dim;
    for (int k = fsq.dims() - 1; k >= 0; --k) {
      const auto bin = static_cast<int>(v % levels);
      v /= levels;
      const double b = fsq.bounds[k];
      const double y = -b + (bin + 0.5) * (2.0 * b / levels);
      auto p = fsq.projection.row(k);
      for (int j = 0; j < model.d_emb; ++j) x[j] += y * p[j];
    }
  }
  return x;
}

std::vector<double> residual_energy(const TokenizerModel& model, const MatF& embeddings) {
  std::vector<double> energy(model.codebooks.size() + 1, 0.0);
  const int d = model.d_emb;
  std::vector<float> r(d);
  for (int i = 0; i < embeddings.rows; ++i) {
    auto x = embeddings.row(i);
    std::copy(x.begin(), x.end(), r.begin());
    auto sq = [&] {
      double s = 0.0;
      for (float v : r) s += static_cast<double>(v) * v;
      return s;
    };
    energy[0] += sq();
    for (std::size_t l = 0; l < model.codebooks.size(); ++l) {
      const auto& cb = model.codebooks[l];
      int arg = 0;
      double dist = 0.0;
      kernels::ref::nearest_centroid(r.data(), 1, cb.centroids.data.data(), cb.size(), d, &arg, &dist);
      auto c = cb.centroids.row(arg);
      for (int j = 0; j < d; ++j) r[j] -= c[j];
      energy[l + 1] += sq();
    }
  }
  return energy;
}

TokenizerModel fit_fsq_extension(const TokenizerModel& model, const MatF& embeddings, int m, int levels_per_dim) {
  if (model.codebooks.empty()) throw ConfigError("fit_fsq_extension: tokenizer has no fitted levels");
  if (model.fsq) throw ConfigError("fit_fsq_extension: tokenizer already extended");
  if (m < 1 || m > model.d_emb) {
    throw ConfigError("fit_fsq_extension: m=" + std::to_string(m) + " must lie in [1, d_emb=" +
                      std::to_string(model.d_emb) + "]");
  }
  if (levels_per_dim < 2) throw ConfigError("fit_fsq_extension: levels_per_dim must be >= 2");
  if (embeddings.rows < 1) throw FitError("fit_fsq_extension: no embeddings");
  if (std::pow(static_cast<double>(levels_per_dim), m) > static_cast<double>(kMaxFsqCodeSpace)) {
    throw ConfigError("fit_fsq_extension: code space levels_per_dim^m too large");
  }

  const int d = model.d_emb;
  const int n = embeddings.rows;
  Eigen::MatrixXd residuals(n, d);
  std::vector<float> r(d);
  std::vector<int> scratch;
  for (int i = 0; i < n; ++i) {
    check_embedding(model, embeddings.row(i));
    auto x = embeddings.row(i);
    std::copy(x.begin(), x.end(), r.begin());
    scratch.clear();
    encode_codebooks(model, r, scratch);
    for (int j = 0; j < d; ++j) residuals(i, j) = r[j];
  }
  // Principal directions of the (uncentred) residual second moment.
  const Eigen::MatrixXd moment = residuals.transpose() * residuals / static_cast<double>(n);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(moment);
  if (eig.info() != Eigen::Success) throw FitError("fit_fsq_extension: eigendecomposition failed");

  FsqExtension fsq;
  fsq.levels_per_dim = levels_per_dim;
  fsq.projection = MatD(m, d);
  fsq.bounds.assign(m, 0.0);
  for (int k = 0; k < m; ++k) {
    const Eigen::VectorXd v = eig.eigenvectors().col(d - 1 - k);
    for (int j = 0; j < d; ++j) fsq.projection(k, j) = v(j);
    const Eigen::VectorXd y = residuals * v;
    const double bound = y.cwiseAbs().maxCoeff();
    fsq.bounds[k] = bound > 0.0 ? bound : 1.0;
  }
  TokenizerModel out = model;
  out.fsq = std::move(fsq);
  return out;
}

double collision_rate(std::span<const ItemicCode> codes) {
  if (codes.empty()) return 0.0;
  std::unordered_map<ItemicCode, int, ItemicCodeHash> counts;
  for (const auto& c : codes) ++counts[c];
  std::size_t shared = 0;
  for (const auto& c : codes) shared += counts[c] > 1 ? 1 : 0;
  return static_cast<double>(shared) / static_cast<double>(codes.size());
}

std::string resolve_by_popularity(const ItemicCode& code, std::span<const corpus::Item* const> candidates) {
  if (candidates.empty()) throw IndexError("resolve_by_popularity: no item carries code " + serialize(code));
  const corpus::Item* best = candidates.front();
  for (const corpus::Item* c : candidates.subspan(1)) {
    if (c->popularity > best->popularity || (c->popularity == best->popularity && c->item_id < best->item_id)) {
      best = c;
    }
  }
  return best->item_id;
}

std::string serialize(const ItemicCode& code) {
  std::string out(kBegin);
  for (std::size_t l = 0; l < code.size(); ++l) {
    out += "<item_";
    out += level_letter(static_cast<int>(l));
    out += '_';
    out += std::to_string(code[l]);
    out += '>';
  }
  out += kEnd;
  return out;
}

ItemicCode parse(std::string_view text) {
  std::size_t pos = 0;
  auto fail = [&](const std::string& what) -> ParseError {
    return ParseError("item token string: " + what + " at offset " + std::to_string(pos), pos);
  };
  if (text.substr(0, kBegin.size()) != kBegin) throw fail("expected <|item_begin|>");
  pos = kBegin.size();
  ItemicCode code;
  while (true) {
    if (text.substr(pos, kEnd.size()) == kEnd) {
      if (code.codes.empty()) throw fail("no item levels");
      pos += kEnd.size();
      if (pos != text.size()) throw fail("trailing characters");
      return code;
    }
    const std::string prefix = std::string("<item_") + level_letter(static_cast<int>(code.size())) + "_";
    if (pos >= text.size()) throw fail("missing level or <|item_end|>");
    if (text.substr(pos, prefix.size()) != prefix) throw fail("expected " + prefix);
    pos += prefix.size();
    const std::size_t digits_begin = pos;
    while (pos < text.size() && std::isdigit(static_cast<unsigned char>(text[pos]))) ++pos;
    if (pos == digits_begin) throw fail("expected code digits");
    int value = 0;
    auto [ptr, ec] = std::from_chars(text.data() + digits_begin, text.data() + pos, value);
    if (ec != std::errc{}) throw fail("code out of range");
    (void)ptr;
    if (pos >= text.size() || text[pos] != '>') throw fail("expected '>'");
    ++pos;
    code.codes.push_back(value);
  }
}

std::vector<std::string> text_augmented_tokens(const ItemicCode& code, std::span<const std::string> keywords) {
  std::vector<std::string> out{serialize(code)};
  out.insert(out.end(), keywords.begin(), keywords.end());
  return out;
}

std::vector<std::string> caption_keywords(std::string_view caption, std::size_t max_keywords) {
  static const std::vector<std::string> kStop{"a", "an", "the", "and", "of", "with", "about", "in", "on"};
  std::vector<std::string> order;
  std::map<std::string, int> tf;
  std::string word;
  auto flush = [&] {
    if (!word.empty() && std::find(kStop.begin(), kStop.end(), word) == kStop.end()) {
      if (tf[word]++ == 0) order.push_back(word);
    }
    word.clear();
  };
  for (char ch : caption) {
    if (std::isalnum(static_cast<unsigned char>(ch))) {
      word += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    } else {
      flush();
    }
  }
  flush();
  std::stable_sort(order.begin(), order.end(), [&](const auto& a, const auto& b) { return tf[a] > tf[b]; });
  if (order.size() > max_keywords) order.resize(max_keywords);
  return order;
}

void save_tokenizer(const TokenizerModel& model, const std::filesystem::path& path) {
  io::ByteWriter w;
  w.put_bytes(kMagic);
  w.put(model.config_hash);
  w.put(static_cast<std::uint32_t>(model.codebooks.size()));
  w.put(static_cast<std::uint32_t>(model.d_emb));
  for (const auto& cb : model.codebooks) w.put(static_cast<std::uint32_t>(cb.size()));
  for (const auto& cb : model.codebooks) w.put_span(std::span<const float>(cb.centroids.data));
  w.put(static_cast<std::uint8_t>(model.fsq ? 1 : 0));
  if (model.fsq) {
    w.put(static_cast<std::uint32_t>(model.fsq->dims()));
    w.put(static_cast<std::uint32_t>(model.fsq->levels_per_dim));
    w.put_span(std::span<const double>(model.fsq->projection.data));
    w.put_span(std::span<const double>(model.fsq->bounds));
  }
  io::write_file_atomic(path, w.bytes());
}

TokenizerModel load_tokenizer(const std::filesystem::path& path) {
  io::ByteReader r(io::read_file(path), path.filename().string());
  if (r.get_bytes(kMagic.size()) != kMagic) r.fail("bad magic (expected RQKM1)");
  TokenizerModel model;
  model.config_hash = r.get<std::uint64_t>();
  const auto levels = r.get<std::uint32_t>();
  model.d_emb = static_cast<int>(r.get<std::uint32_t>());
  if (levels == 0 || levels > 64 || model.d_emb <= 0 || model.d_emb > (1 << 20)) r.fail("implausible header");
  std::vector<std::uint32_t> sizes(levels);
  for (auto& k : sizes) {
    k = r.get<std::uint32_t>();
    if (k == 0 || k > (1u << 24)) r.fail("implausible codebook size");
  }
  for (std::uint32_t l = 0; l < levels; ++l) {
    Codebook cb{static_cast<int>(l), MatF(static_cast<int>(sizes[l]), model.d_emb)};
    r.get_span(std::span<float>(cb.centroids.data));
    model.codebooks.push_back(std::move(cb));
  }
  const auto has_fsq = r.get<std::uint8_t>();
  if (has_fsq > 1) r.fail("bad FSQ flag");
  if (has_fsq) {
    FsqExtension fsq;
    const auto m = static_cast<int>(r.get<std::uint32_t>());
    fsq.levels_per_dim = static_cast<int>(r.get<std::uint32_t>());
    if (m < 1 || m > model.d_emb || fsq.levels_per_dim < 2) r.fail("implausible FSQ header");
    fsq.projection = MatD(m, model.d_emb);
    fsq.bounds.assign(m, 0.0);
    r.get_span(std::span<double>(fsq.projection.data));
    r.get_span(std::span<double>(fsq.bounds));
    model.fsq = std::move(fsq);
  }
  r.expect_end();
  return model;
}

MatF embedding_matrix(std::span<const corpus::Item> items) {
  if (items.empty()) return {};
  MatF m(static_cast<int>(items.size()), static_cast<int>(items.front().embedding.size()));
  for (int i = 0; i < m.rows; ++i) {
    const auto& e = items[i].embedding;
    if (static_cast<int>(e.size()) != m.cols) throw InputError("inconsistent embedding dimension");
    std::copy(e.begin(), e.end(), m.row(i).begin());
  }
  return m;
}

}  // namespace onerec::rq
