#pragma once

// Latency metrics measured from event logs, their closed-form predictions,
// trace export and multi-config comparison tables.

#include <cfenv>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include "flowstream/streamexec.hpp"

namespace flowstream {

struct MetricsReport {
  double T_action = 0.0;         // (last Execute end - first Observe start) / actions
  double steady_T_action = 0.0;  // same, excluding the first horizon
  double T_halt = 0.0;           // idle execution time per horizon boundary
  double O_ge = 0.0;             // Generate/Execute overlap per horizon
  double O_oe = 0.0;             // Observe/Execute overlap per horizon boundary
  double O_ge_total = 0.0;
  double O_oe_total = 0.0;
  double success_rate = 0.0;
  double eo_rate = 0.0;
  double num_actions = 0.0;
  double num_horizons = 0.0;
  double episode_duration = 0.0;  // first Observe start to last Execute end
};

using Interval = std::pair<double, double>;

/// Sorted, disjoint union of the given intervals (empty ones dropped).
inline std::vector<Interval> merge_intervals(std::vector<Interval> v) {
  std::sort(v.begin(), v.end());
  std::vector<Interval> out;
  for (const Interval& iv : v) {
    if (iv.second <= iv.first) continue;
    if (!out.empty() && iv.first <= out.back().second) {
      out.back().second = std::max(out.back().second, iv.second);
    } else {
      out.push_back(iv);
    }
  }
  return out;
}

/// Measure of the intersection of two disjoint sorted interval sets.
inline double overlap_measure(const std::vector<Interval>& a, const std::vector<Interval>& b) {
  double total = 0.0;
  std::size_t i = 0, j = 0;
  while (i < a.size() && j < b.size()) {
    const double lo = std::max(a[i].first, b[j].first);
    const double hi = std::min(a[i].second, b[j].second);
    if (hi > lo) total += hi - lo;
    if (a[i].second < b[j].second) {
      ++i;
    } else {
      ++j;
    }
  }
  return total;
}

inline MetricsReport measure(std::span<const TimelineEvent> log) {
  require(!log.empty(), ErrorCode::kEmptyInput, "event log is empty");
  std::map<Stage, std::vector<Interval>> by_stage;
  std::vector<const TimelineEvent*> execs;
  std::int64_t first_horizon = std::numeric_limits<std::int64_t>::max();
  for (const TimelineEvent& e : log) {
    require(e.end >= e.start, ErrorCode::kInvalidArgument, "event ends before it starts");
    by_stage[e.stage].emplace_back(e.start, e.end);
    if (e.stage == Stage::kExecute) {
      execs.push_back(&e);
      first_horizon = std::min(first_horizon, e.horizon_index);
    }
  }
  require(!execs.empty(), ErrorCode::kEmptyInput, "event log has no Execute events");
  std::sort(execs.begin(), execs.end(), [](auto* a, auto* b) { return a->start < b->start; });

  MetricsReport r;
  const auto& observes = by_stage[Stage::kObserve];
  double t0 = execs.front()->start;
  for (const Interval& o : observes) t0 = std::min(t0, o.first);
  double last_end = 0.0;
  for (auto* e : execs) last_end = std::max(last_end, e->end);
  const auto n = static_cast<double>(execs.size());
  r.num_actions = n;
  r.num_horizons = static_cast<double>(std::max<std::size_t>(observes.size(), 1));
  r.episode_duration = last_end - t0;
  r.T_action = r.episode_duration / n;

  double first_horizon_end = t0;
  double first_horizon_count = 0.0;
  for (auto* e : execs) {
    if (e->horizon_index == first_horizon) {
      first_horizon_end = std::max(first_horizon_end, e->end);
      ++first_horizon_count;
    }
  }
  r.steady_T_action = n > first_horizon_count ? (last_end - first_horizon_end) / (n - first_horizon_count) : r.T_action;

  const std::vector<Interval> exec_union = merge_intervals(by_stage[Stage::kExecute]);
  double idle = 0.0;
  for (std::size_t i = 1; i < exec_union.size(); ++i) idle += exec_union[i].first - exec_union[i - 1].second;
  const double boundaries = std::max(1.0, r.num_horizons - 1.0);
  r.T_halt = idle / boundaries;

  r.O_ge_total = overlap_measure(merge_intervals(by_stage[Stage::kGenerate]), exec_union);
  r.O_oe_total = overlap_measure(merge_intervals(observes), exec_union);
  r.O_ge = r.O_ge_total / r.num_horizons;
  r.O_oe = r.O_oe_total / boundaries;
  return r;
}

inline MetricsReport measure(const EpisodeResult& ep) {
  MetricsReport r = measure(ep.events);
  r.success_rate = ep.success ? 1.0 : 0.0;
  r.eo_rate = ep.eo_rate();
  return r;
}

// ---------------------------------------------------------------------------
// Closed forms

struct TimingPrediction {
  double T_action = 0.0;
  double T_halt = 0.0;
  double O_ge = 0.0;
  double O_oe = 0.0;
};

/// Steady-state timing. `n_eo_avg` is the mean number of actions whose
/// execution overlaps the next observation (streaming only).
inline TimingPrediction closed_form(const StageLatency& s, int h, int n_replan, SchedulerMode mode, double n_eo_avg) {
  s.validate();
  require(h >= 1 && n_replan >= 1 && n_replan <= h, ErrorCode::kInvalidArgument, "need 1 <= n_replan <= h");
  require(n_eo_avg >= 0.0 && n_eo_avg < h, ErrorCode::kInvalidArgument, "n_eo_avg must lie in [0, h)");
  const double T_g = h * s.t_gen;
  TimingPrediction p;
  if (mode == SchedulerMode::kSyncChunk) {
    p.T_action = (s.t_obs + T_g + n_replan * s.t_exec) / n_replan;
    p.T_halt = s.t_obs + T_g;
    return p;
  }
  p.O_ge = (h - 1) * std::min(s.t_gen, s.t_exec);
  p.O_oe = n_eo_avg * s.t_exec;
  p.T_action = (s.t_obs + T_g + h * s.t_exec - p.O_ge - p.O_oe) / h;
  p.T_halt = s.t_obs + T_g - (p.O_ge + p.O_oe);
  return p;
}

// ---------------------------------------------------------------------------
// Trace export

enum class TraceFormat : std::uint8_t { kCsv, kTraceJson };

inline constexpr std::string_view kTraceCsvHeader = "stage,action_index,horizon_index,start_ms,end_ms";

/// Milliseconds to integer microseconds, ties to even.
inline std::int64_t to_microseconds(double ms) {
  const int prev = std::fegetround();
  std::fesetround(FE_TONEAREST);
  const auto us = static_cast<std::int64_t>(std::nearbyint(ms * 1000.0));
  std::fesetround(prev);
  return us;
}

inline std::string trace_csv(std::span<const TimelineEvent> log) {
  std::ostringstream os;
  os << kTraceCsvHeader << '\n' << std::setprecision(17);
  for (const TimelineEvent& e : log) {
    os << to_string(e.stage) << ',' << e.action_index << ',' << e.horizon_index << ',' << e.start << ',' << e.end
       << '\n';
  }
  return os.str();
}

inline std::vector<TimelineEvent> parse_trace_csv(std::istream& in) {
  std::string line;
  require(static_cast<bool>(std::getline(in, line)) && line == kTraceCsvHeader, ErrorCode::kCorruptFile,
          "trace csv header mismatch");
  std::vector<TimelineEvent> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string f[5];
    for (std::string& field : f) {
      require(static_cast<bool>(std::getline(row, field, ',')), ErrorCode::kCorruptFile, "short trace row: " + line);
    }
    TimelineEvent e;
    e.stage = parse_stage(f[0]);
    e.action_index = std::stoll(f[1]);
    e.horizon_index = std::stoll(f[2]);
    e.start = std::stod(f[3]);
    e.end = std::stod(f[4]);
    out.push_back(e);
  }
  return out;
}

inline nlohmann::json trace_json(std::span<const TimelineEvent> log) {
  nlohmann::json arr = nlohmann::json::array();
  for (const TimelineEvent& e : log) {
    arr.push_back({{"name", to_string(e.stage)},
                   {"ph", "X"},
                   {"ts", to_microseconds(e.start)},
                   {"dur", to_microseconds(e.end - e.start)},
                   {"pid", 1},
                   {"tid", static_cast<int>(e.stage)},
                   {"args", {{"action_index", e.action_index}, {"horizon_index", e.horizon_index}}}});
  }
  return arr;
}

inline void export_trace(std::span<const TimelineEvent> log, const std::filesystem::path& path, TraceFormat format) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorCode::kIo, "cannot open " + path.string() + " for writing");
  if (format == TraceFormat::kCsv) {
    out << trace_csv(log);
  } else {
    out << trace_json(log).dump(1) << '\n';
  }
  require(static_cast<bool>(out), ErrorCode::kIo, "failed writing " + path.string());
}

// ---------------------------------------------------------------------------
// Aggregation

struct ConfigReports {
  std::string name;
  std::vector<MetricsReport> reports;
};

struct ComparisonRow {
  std::string name;
  std::size_t episodes = 0;
  MetricsReport mean;
  double speedup_T_action = 1.0;  // baseline / this
  double speedup_T_halt = 1.0;
};

struct ComparisonTable {
  std::string baseline;
  std::vector<ComparisonRow> rows;
};

inline MetricsReport mean_report(std::span<const MetricsReport> reports) {
  require(!reports.empty(), ErrorCode::kEmptyInput, "no reports to average");
  MetricsReport m;
  auto fields = [](MetricsReport& r) {
    return std::array<double*, 12>{&r.T_action, &r.steady_T_action, &r.T_halt,      &r.O_ge,
                                   &r.O_oe,     &r.O_ge_total,      &r.O_oe_total,  &r.success_rate,
                                   &r.eo_rate,  &r.num_actions,     &r.num_horizons, &r.episode_duration};
  };
  auto acc = fields(m);
  for (MetricsReport r : reports) {
    auto f = fields(r);
    for (std::size_t i = 0; i < acc.size(); ++i) *acc[i] += *f[i];
  }
  for (double* v : acc) *v /= static_cast<double>(reports.size());
  return m;
}

inline double ratio(double num, double den) {
  if (den == 0.0) return num == 0.0 ? 1.0 : std::numeric_limits<double>::infinity();
  return num / den;
}

inline ComparisonTable aggregate(std::span<const ConfigReports> configs, const std::string& baseline) {
  require(!configs.empty(), ErrorCode::kEmptyInput, "no configurations to aggregate");
  std::set<std::string> names;
  for (const ConfigReports& c : configs) {
    require(names.insert(c.name).second, ErrorCode::kInvalidArgument, "duplicate configuration '" + c.name + "'");
    require(!c.reports.empty(), ErrorCode::kInvalidArgument, "configuration '" + c.name + "' has no reports");
  }
  require(names.contains(baseline), ErrorCode::kInvalidArgument, "baseline '" + baseline + "' not among configurations");
  ComparisonTable t;
  t.baseline = baseline;
  for (const ConfigReports& c : configs) t.rows.push_back({c.name, c.reports.size(), mean_report(c.reports)});
  const MetricsReport base =
      std::find_if(t.rows.begin(), t.rows.end(), [&](const ComparisonRow& r) { return r.name == baseline; })->mean;
  for (ComparisonRow& r : t.rows) {
    r.speedup_T_action = ratio(base.T_action, r.mean.T_action);
    r.speedup_T_halt = ratio(base.T_halt, r.mean.T_halt);
  }
  return t;
}

inline constexpr std::string_view kComparisonCsvHeader =
    "config,episodes,success_rate,eo_rate,T_action_ms,steady_T_action_ms,T_halt_ms,O_ge_ms,O_oe_ms,"
    "num_actions,episode_duration_ms,speedup_T_action,speedup_T_halt";

inline std::string render_csv(const ComparisonTable& t) {
  std::ostringstream os;
  os << kComparisonCsvHeader << '\n' << std::setprecision(10);
  for (const ComparisonRow& r : t.rows) {
    const MetricsReport& m = r.mean;
    os << r.name << ',' << r.episodes << ',' << m.success_rate << ',' << m.eo_rate << ',' << m.T_action << ','
       << m.steady_T_action << ',' << m.T_halt << ',' << m.O_ge << ',' << m.O_oe << ',' << m.num_actions << ','
       << m.episode_duration << ',' << r.speedup_T_action << ',' << r.speedup_T_halt << '\n';
  }
  return os.str();
}

inline std::string render_text(const ComparisonTable& t) {
  std::ostringstream os;
  std::size_t w = 8;
  for (const ComparisonRow& r : t.rows) w = std::max(w, r.name.size() + 2);
  os << std::left << std::setw(static_cast<int>(w)) << "config" << std::right << std::setw(9) << "success"
     << std::setw(9) << "eo_rate" << std::setw(11) << "T_action" << std::setw(11) << "T_halt" << std::setw(10)
     << "O_ge" << std::setw(10) << "O_oe" << std::setw(11) << "x T_act" << std::setw(11) << "x T_halt" << '\n';
  os << std::fixed;
  for (const ComparisonRow& r : t.rows) {
    const MetricsReport& m = r.mean;
    os << std::left << std::setw(static_cast<int>(w)) << r.name << std::right << std::setprecision(3)
       << std::setw(9) << m.success_rate << std::setw(9) << m.eo_rate << std::setprecision(2) << std::setw(11)
       << m.T_action << std::setw(11) << m.T_halt << std::setw(10) << m.O_ge << std::setw(10) << m.O_oe
       << std::setw(11) << r.speedup_T_action << std::setw(11) << r.speedup_T_halt << '\n';
  }
  os << "(speedups relative to " << t.baseline << ")\n";
  return os.str();
}

inline constexpr std::string_view kEpisodeCsvHeader =
    "config,episode,success,eo_rate,T_action_ms,steady_T_action_ms,T_halt_ms,O_ge_ms,O_oe_ms,num_actions,"
    "num_horizons,episode_duration_ms";

inline std::string render_episode_csv(std::span<const ConfigReports> configs) {
  std::ostringstream os;
  os << kEpisodeCsvHeader << '\n' << std::setprecision(10);
  for (const ConfigReports& c : configs) {
    for (std::size_t i = 0; i < c.reports.size(); ++i) {
      const MetricsReport& m = c.reports[i];
      os << c.name << ',' << i << ',' << m.success_rate << ',' << m.eo_rate << ',' << m.T_action << ','
         << m.steady_T_action << ',' << m.T_halt << ',' << m.O_ge << ',' << m.O_oe << ',' << m.num_actions << ','
         << m.num_horizons << ',' << m.episode_duration << '\n';
    }
  }
  return os.str();
}

}  // namespace flowstream
