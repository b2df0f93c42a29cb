#include "onerec/evalmetrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include "json.hpp"

namespace onerec::eval {

using nlohmann::json;

namespace {

void check_k(int k) {
  if (k < 1) throw InputError("metric: k must be >= 1");
}

void check_distinct(std::span<const rq::ItemicCode> candidates) {
  std::vector<const rq::ItemicCode*> sorted;
  for (const auto& c : candidates) sorted.push_back(&c);
  std::sort(sorted.begin(), sorted.end(), [](auto* a, auto* b) { return *a < *b; });
  for (std::size_t i = 1; i < sorted.size(); ++i) {
    if (*sorted[i] == *sorted[i - 1]) throw InputError("metric: duplicate candidate");
  }
}

std::vector<std::string_view> words(std::string_view s) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
    const std::size_t start = i;
    while (i < s.size() && !std::isspace(static_cast<unsigned char>(s[i]))) ++i;
    if (i > start) out.push_back(s.substr(start, i - start));
  }
  return out;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

}  // namespace

int pass_at_k(std::span<const rq::ItemicCode> candidates, std::span<const rq::ItemicCode> targets, int k) {
  check_k(k);
  check_distinct(candidates);
  const std::size_t top = std::min<std::size_t>(k, candidates.size());
  for (std::size_t i = 0; i < top; ++i) {
    if (std::find(targets.begin(), targets.end(), candidates[i]) != targets.end()) return 1;
  }
  return 0;
}

double recall_at_k(std::span<const rq::ItemicCode> candidates, std::span<const rq::ItemicCode> targets, int k) {
  check_k(k);
  if (targets.empty()) throw InputError("recall_at_k: empty target set");
  check_distinct(candidates);
  std::vector<rq::ItemicCode> unique(targets.begin(), targets.end());
  std::sort(unique.begin(), unique.end());
  unique.erase(std::unique(unique.begin(), unique.end()), unique.end());
  const std::size_t top = std::min<std::size_t>(k, candidates.size());
  std::size_t hits = 0;
  for (const auto& t : unique) {
    if (std::find(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(top), t) !=
        candidates.begin() + static_cast<std::ptrdiff_t>(top)) {
      ++hits;
    }
  }
  return static_cast<double>(hits) / static_cast<double>(unique.size());
}

double auc(std::span<const LabelScore> scores) {
  std::size_t n_pos = 0;
  for (const auto& s : scores) {
    if (!std::isfinite(s.score)) throw InputError("auc: non-finite score");
    n_pos += s.label ? 1 : 0;
  }
  const std::size_t n_neg = scores.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) throw MetricError("auc: need at least one positive and one negative");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a].score < scores[b].score; });
  // Ranks are 1-based; a tie group spanning [i, j) shares rank (i + 1 + j) / 2.
  double rank_sum = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    std::size_t pos_in_group = 0;
    while (j < order.size() && scores[order[j]].score == scores[order[i]].score) {
      pos_in_group += scores[order[j]].label ? 1 : 0;
      ++j;
    }
    rank_sum += static_cast<double>(pos_in_group) * (static_cast<double>(i + 1 + j) / 2.0);
    i = j;
  }
  const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
  return (rank_sum - np * (np + 1) / 2.0) / (np * nn);
}

double two_way_probability(double yes_logit, double no_logit) {
  if (std::isnan(yes_logit) || std::isnan(no_logit)) throw InputError("two_way_probability: NaN logit");
  if (yes_logit == no_logit) return 0.5;
  return 1.0 / (1.0 + std::exp(no_logit - yes_logit));
}

template <typename T>
double yes_probability(const model::Parameters<T>& params, std::span<const int> prompt, int yes_token, int no_token) {
  if (prompt.empty()) throw InputError("yes_probability: empty prompt");
  const int v = params.config.vocab_size;
  if (yes_token < 0 || yes_token >= v || no_token < 0 || no_token >= v || yes_token == no_token) {
    throw ConfigError("yes_probability: invalid answer tokens");
  }
  model::Decoder<T> dec(params);
  std::span<const T> logits;
  for (int t : prompt) logits = dec.step(t);
  return two_way_probability(static_cast<double>(logits[yes_token]), static_cast<double>(logits[no_token]));
}

template double yes_probability<float>(const model::Parameters<float>&, std::span<const int>, int, int);
template double yes_probability<double>(const model::Parameters<double>&, std::span<const int>, int, int);

void JudgeTranscript::validate() const {
  for (const auto* list : {&gt_wips, &model_wips}) {
    for (const auto& w : *list) {
      if (w.importance < 1 || w.importance > 5) throw InputError("transcript: importance outside [1, 5]");
    }
  }
  std::vector<int> gt_seen(gt_wips.size(), 0), model_seen(model_wips.size(), 0);
  auto mark = [](std::vector<int>& seen, int idx, const char* what) {
    if (idx < 0 || idx >= static_cast<int>(seen.size())) {
      throw InputError(std::string("transcript: ") + what + " index out of range");
    }
    if (seen[idx]++) throw InputError(std::string("transcript: ") + what + " WIP used twice");
  };
  for (const auto& m : matches) {
    if (!(m.q >= 0.0 && m.q <= 1.0)) throw InputError("transcript: match quality outside [0, 1]");
    mark(gt_seen, m.gt, "gt");
    mark(model_seen, m.model, "model");
  }
  for (int i : unmatched_gt) mark(gt_seen, i, "gt");
  for (int i : unmatched_model) mark(model_seen, i, "model");
  if (std::count(gt_seen.begin(), gt_seen.end(), 0) || std::count(model_seen.begin(), model_seen.end(), 0)) {
    throw InputError("transcript: WIP neither matched nor unmatched");
  }
}

namespace {

json wips_json(const std::vector<Wip>& wips) {
  json a = json::array();
  for (const auto& w : wips) a.push_back({{"statement", w.statement}, {"importance", w.importance}});
  return a;
}

std::vector<Wip> wips_from(const json& a) {
  std::vector<Wip> out;
  for (const auto& w : a) out.push_back(Wip{w.at("statement").get<std::string>(), w.at("importance").get<int>()});
  return out;
}

}  // namespace

std::string JudgeTranscript::to_json() const {
  json m = json::array();
  for (const auto& x : matches) m.push_back({{"gt", x.gt}, {"model", x.model}, {"q", x.q}});
  return json{{"gt_wips", wips_json(gt_wips)},
              {"model_wips", wips_json(model_wips)},
              {"matches", m},
              {"unmatched_gt", unmatched_gt},
              {"unmatched_model", unmatched_model}}
      .dump();
}

JudgeTranscript JudgeTranscript::from_json(std::string_view text) {
  JudgeTranscript t;
  try {
    const auto j = json::parse(text);
    t.gt_wips = wips_from(j.at("gt_wips"));
    t.model_wips = wips_from(j.at("model_wips"));
    for (const auto& m : j.at("matches")) {
      t.matches.push_back(WipMatch{m.at("gt").get<int>(), m.at("model").get<int>(), m.at("q").get<double>()});
    }
    t.unmatched_gt = j.at("unmatched_gt").get<std::vector<int>>();
    t.unmatched_model = j.at("unmatched_model").get<std::vector<int>>();
  } catch (const json::exception& e) {
    throw ParseError(std::string("transcript: ") + e.what(), 0);
  }
  t.validate();
  return t;
}

F1Parts dwf1_parts(const JudgeTranscript& t) {
  t.validate();
  F1Parts p;
  for (const auto& m : t.matches) {
    const double sg = t.gt_wips[m.gt].importance;
    const double sm = t.model_wips[m.model].importance;
    p.tp += sg * m.q;
    p.fn += sg * (1.0 - m.q);
    p.fp += sm * (1.0 - m.q);
  }
  for (int i : t.unmatched_gt) p.fn += t.gt_wips[i].importance;
  for (int i : t.unmatched_model) p.fp += t.model_wips[i].importance;
  const double denom = 2.0 * p.tp + p.fp + p.fn;
  p.f1 = denom > 0 ? 2.0 * p.tp / denom : 0.0;
  return p;
}

double dwf1(const JudgeTranscript& t) { return dwf1_parts(t).f1; }

double judge_score(std::span<const JudgeTranscript> transcripts) {
  if (transcripts.empty()) throw InputError("judge_score: no transcripts");
  double sum = 0;
  for (const auto& t : transcripts) sum += dwf1(t);
  return sum / static_cast<double>(transcripts.size());
}

double lexical_match_quality(std::string_view a, std::string_view b) {
  const auto wa = words(a), wb = words(b);
  if (wa.empty() && wb.empty()) return 1.0;
  if (wa.empty() || wb.empty()) return 0.0;
  std::unordered_map<std::string_view, int> count;
  for (auto w : wa) ++count[w];
  int common = 0;
  for (auto w : wb) {
    auto it = count.find(w);
    if (it != count.end() && it->second > 0) {
      --it->second;
      ++common;
    }
  }
  if (common == 0) return 0.0;
  const double precision = static_cast<double>(common) / static_cast<double>(wb.size());
  const double recall = static_cast<double>(common) / static_cast<double>(wa.size());
  return 2.0 * precision * recall / (precision + recall);
}

std::vector<Wip> extract_wips(std::string_view text) {
  std::vector<Wip> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t cut = text.find(',', start);
    const auto piece = trim(text.substr(start, cut == std::string_view::npos ? std::string_view::npos : cut - start));
    if (!piece.empty()) {
      const int importance = out.empty() ? 5 : out.size() == 1 ? 3 : 1;
      out.push_back(Wip{std::string(piece), importance});
    }
    if (cut == std::string_view::npos) break;
    start = cut + 1;
  }
  return out;
}

JudgeTranscript build_transcript(std::string_view reference, std::string_view generated) {
  JudgeTranscript t;
  t.gt_wips = extract_wips(reference);
  t.model_wips = extract_wips(generated);
  const std::size_t ng = t.gt_wips.size(), nm = t.model_wips.size();
  std::vector<double> q(ng * nm);
  for (std::size_t i = 0; i < ng; ++i) {
    for (std::size_t j = 0; j < nm; ++j) q[i * nm + j] = lexical_match_quality(t.gt_wips[i].statement, t.model_wips[j].statement);
  }
  std::vector<char> gt_used(ng, 0), model_used(nm, 0);
  for (;;) {
    double best = 0;
    std::size_t bi = 0, bj = 0;
    for (std::size_t i = 0; i < ng; ++i) {
      if (gt_used[i]) continue;
      for (std::size_t j = 0; j < nm; ++j) {
        if (!model_used[j] && q[i * nm + j] > best) {
          best = q[i * nm + j];
          bi = i;
          bj = j;
        }
      }
    }
    if (best <= 0) break;
    gt_used[bi] = model_used[bj] = 1;
    t.matches.push_back(WipMatch{static_cast<int>(bi), static_cast<int>(bj), best});
  }
  for (std::size_t i = 0; i < ng; ++i) {
    if (!gt_used[i]) t.unmatched_gt.push_back(static_cast<int>(i));
  }
  for (std::size_t j = 0; j < nm; ++j) {
    if (!model_used[j]) t.unmatched_model.push_back(static_cast<int>(j));
  }
  return t;
}

std::string MetricReport::to_json() const {
  json j = json::object();
  for (const auto& [task, metrics] : tasks) {
    json m = json::object();
    for (const auto& [name, value] : metrics) m[name] = value;
    j[task] = m;
  }
  return j.dump(2) + "\n";
}

MetricReport MetricReport::from_json(std::string_view text) {
  MetricReport r;
  try {
    const auto j = json::parse(text);
    for (const auto& [task, metrics] : j.items()) {
      for (const auto& [name, value] : metrics.items()) r.tasks[task][name] = value.get<double>();
    }
  } catch (const json::exception& e) {
    throw ParseError(std::string("metric report: ") + e.what(), 0);
  }
  return r;
}

std::string MetricReport::to_csv() const {
  std::ostringstream out;
  out.precision(17);
  out << "task,metric,value\n";
  for (const auto& [task, metrics] : tasks) {
    for (const auto& [name, value] : metrics) out << task << ',' << name << ',' << value << '\n';
  }
  return out.str();
}

}  // namespace onerec::eval
