#pragma once
// On-disk dataset layout:
//   <root>/dataset.json             {"format", "version", "n", "tasks": [ids]}
//   <root>/<task>/manifest.json     task id, n, snr_db, classes, operating points, sample counts, files, row loads
//   <root>/<task>/<class>.csv       one segment per row, n*n comma-separated decimals
// External recordings can be ingested by writing the same layout; "row_loads" is optional.

#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "motormeta/episodes.hpp"
#include "motormeta/error.hpp"

namespace motormeta {

inline constexpr int kDatasetVersion = 1;

namespace detail {

inline nlohmann::json read_json_file(const std::filesystem::path& p) {
  std::ifstream is(p);
  if (!is) throw ValidationError("cannot open " + p.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("malformed JSON in " + p.string() + ": " + e.what());
  }
}

inline void write_text_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw RuntimeFailure("cannot write " + p.string());
  os << text;
  if (!os) throw RuntimeFailure("failed writing " + p.string());
}

}  // namespace detail

inline void write_task(const TaskDataset& task, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json m;
  m["task_id"] = task.id;
  m["n"] = task.n;
  m["snr_db"] = task.snr_db ? nlohmann::json(*task.snr_db) : nlohmann::json(nullptr);
  nlohmann::json classes = nlohmann::json::array(), counts = nlohmann::json::object(), files = nlohmann::json::object(),
                 loads = nlohmann::json::object(), ops = nlohmann::json::array();
  std::set<int> used_loads(task.loads.begin(), task.loads.end());
  for (int l : used_loads)
    ops.push_back({{"load_fraction", kLoadSpeedTable[static_cast<std::size_t>(l)].load_fraction},
                   {"speed_rpm", kLoadSpeedTable[static_cast<std::size_t>(l)].speed_rpm}});

  std::string line;
  char buf[32];
  for (auto c : task.classes()) {
    const std::string name(to_string(c));
    classes.push_back(name);
    const auto idx = task.indices_of(c);
    counts[name] = idx.size();
    files[name] = name + ".csv";
    nlohmann::json row_loads = nlohmann::json::array();
    std::ofstream os(dir / (name + ".csv"), std::ios::binary);
    if (!os) throw RuntimeFailure("cannot write " + (dir / (name + ".csv")).string());
    for (auto i : idx) {
      line.clear();
      const auto seg = task.segment_values(i);
      for (std::size_t k = 0; k < seg.size(); ++k) {
        if (k) line.push_back(',');
        const auto r = std::to_chars(buf, buf + sizeof buf, seg[k]);
        line.append(buf, r.ptr);
      }
      line.push_back('\n');
      os << line;
      row_loads.push_back(task.loads[i]);
    }
    if (!os) throw RuntimeFailure("failed writing " + (dir / (name + ".csv")).string());
    loads[name] = row_loads;
  }
  m["classes"] = classes;
  m["operating_points"] = ops;
  m["sample_counts"] = counts;
  m["files"] = files;
  m["row_loads"] = loads;
  nlohmann::json order = nlohmann::json::array();  // class of each sample in task order
  for (auto c : task.labels) order.push_back(std::string(to_string(c)));
  m["sample_order"] = order;
  detail::write_text_file(dir / "manifest.json", m.dump(2) + "\n");
}

inline TaskDataset read_task(const std::filesystem::path& dir) {
  const auto m = detail::read_json_file(dir / "manifest.json");
  TaskDataset task;
  try {
    task.id = m.at("task_id").get<std::string>();
    task.n = m.at("n").get<int>();
    if (m.contains("snr_db") && !m["snr_db"].is_null()) task.snr_db = m["snr_db"].get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("manifest " + (dir / "manifest.json").string() + ": " + e.what());
  }
  require(task.n >= 1, "manifest " + task.id + ": n must be positive");
  const std::size_t len = task.segment_length();
  std::vector<double> seg(len);
  std::string line;
  std::map<FaultClass, std::pair<TaskDataset, std::size_t>> per_class;  // rows of one class, next row to take
  for (const auto& cj : m.at("classes")) {
    const auto name = cj.get<std::string>();
    const auto cls = parse_fault_class(name);
    const auto file = m.contains("files") && m["files"].contains(name) ? m["files"][name].get<std::string>() : name + ".csv";
    std::vector<int> row_loads;
    if (m.contains("row_loads") && m["row_loads"].contains(name)) row_loads = m["row_loads"][name].get<std::vector<int>>();
    std::ifstream is(dir / file, std::ios::binary);
    if (!is) throw ValidationError("task " + task.id + ": missing data file " + (dir / file).string());
    TaskDataset& rows_of = per_class[cls].first;
    rows_of.n = task.n;
    std::size_t rows = 0;
    while (std::getline(is, line)) {
      if (line.empty() || line == "\r") continue;
      const char* p = line.data();
      const char* end = line.data() + line.size();
      for (std::size_t k = 0; k < len; ++k) {
        while (p < end && (*p == ' ' || *p == ',')) ++p;
        float v = 0.0f;
        const auto r = std::from_chars(p, end, v);
        require(r.ec == std::errc(), "task " + task.id + ", " + file + " row " + std::to_string(rows + 1) + ": expected " +
                                         std::to_string(len) + " numbers");
        seg[k] = v;
        p = r.ptr;
      }
      while (p < end && (*p == ' ' || *p == '\r')) ++p;
      require(p == end, "task " + task.id + ", " + file + " row " + std::to_string(rows + 1) + ": more than " +
                            std::to_string(len) + " values");
      const int load = rows < row_loads.size() ? row_loads[rows] : 0;
      require(load >= 0 && load < kNumLoads, "task " + task.id + ": load index out of range");
      rows_of.push_back(seg, cls, load);
      ++rows;
    }
    if (m.contains("sample_counts") && m["sample_counts"].contains(name))
      require(m["sample_counts"][name].get<std::size_t>() == rows,
              "task " + task.id + ": " + file + " has " + std::to_string(rows) + " rows, manifest says " +
                  m["sample_counts"][name].dump());
  }

  std::vector<FaultClass> order;
  if (m.contains("sample_order")) {
    for (const auto& c : m["sample_order"]) order.push_back(parse_fault_class(c.get<std::string>()));
  } else {
    for (const auto& [cls, rows] : per_class) order.insert(order.end(), rows.first.size(), cls);
  }
  for (auto cls : order) {
    auto it = per_class.find(cls);
    require(it != per_class.end() && it->second.second < it->second.first.size(),
            "task " + task.id + ": sample_order does not match the class files");
    auto& [rows, next] = it->second;
    const auto v = rows.segment_values(next);
    task.values.insert(task.values.end(), v.begin(), v.end());
    task.labels.push_back(cls);
    task.loads.push_back(rows.loads[next]);
    ++next;
  }
  for (const auto& [cls, rows] : per_class)
    require(rows.second == rows.first.size(), "task " + task.id + ": sample_order does not cover every row");
  return task;
}

inline void write_dataset(const std::vector<TaskDataset>& tasks, const std::filesystem::path& root,
                          const nlohmann::json& extra = nlohmann::json::object()) {
  std::filesystem::create_directories(root);
  nlohmann::json ids = nlohmann::json::array();
  for (const auto& t : tasks) {
    write_task(t, root / t.id);
    ids.push_back(t.id);
  }
  nlohmann::json j = {{"format", "motormeta-dataset"}, {"version", kDatasetVersion}, {"tasks", ids}};
  if (!tasks.empty()) j["n"] = tasks.front().n;
  for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = it.value();
  detail::write_text_file(root / "dataset.json", j.dump(2) + "\n");
}

inline std::vector<TaskDataset> read_dataset(const std::filesystem::path& root) {
  require(std::filesystem::exists(root / "dataset.json"),
          "no dataset at " + root.string() + " (dataset.json missing; run `gen` first)");
  const auto j = detail::read_json_file(root / "dataset.json");
  require(j.value("version", 0) == kDatasetVersion, "dataset " + root.string() + ": unsupported version");
  std::vector<TaskDataset> tasks;
  for (const auto& id : j.at("tasks")) tasks.push_back(read_task(root / id.get<std::string>()));
  return tasks;
}

}  // namespace motormeta
