#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <mutex>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vlmpref/core.hpp"

namespace vlmpref {

using json = nlohmann::json;

void to_json(json& j, const Resolution& r);
void from_json(const json& j, Resolution& r);
void to_json(json& j, const FeedbackSchedule& s);
void from_json(const json& j, FeedbackSchedule& s);
void to_json(json& j, const RunConfig& c);
void from_json(const json& j, RunConfig& c);

void save_config(const RunConfig& config, const std::filesystem::path& file);
RunConfig load_config(const std::filesystem::path& file);

// Images are written once per content hash under `images/` and referenced by
// their path relative to the run directory.
using ImageWriter = std::function<std::string(const PngImage&)>;
using ImageReader = std::function<std::shared_ptr<const PngImage>(const std::string&)>;

json record_to_json(const PreferenceRecord& record, const ImageWriter& write_image);
PreferenceRecord record_from_json(const json& j, const ImageReader& read_image);

// Append-only `preferences.jsonl` writer. Thread-safe.
class PreferenceLog {
 public:
  explicit PreferenceLog(std::filesystem::path run_dir);

  void append(const PreferenceRecord& record);
  [[nodiscard]] const std::filesystem::path& path() const { return file_; }

  static std::vector<PreferenceRecord> load(const std::filesystem::path& run_dir);

 private:
  std::string store_image(const PngImage& png);

  std::filesystem::path run_dir_;
  std::filesystem::path file_;
  std::ofstream out_;
  std::set<std::string> written_;
  std::mutex mutex_;
};

// Reads every non-empty line of a JSONL file.
std::vector<json> read_jsonl(const std::filesystem::path& file);

}  // namespace vlmpref
