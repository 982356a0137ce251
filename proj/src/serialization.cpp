#include "vlmpref/serialization.hpp"

#include <sstream>

#include "vlmpref/error.hpp"

namespace vlmpref {

void to_json(json& j, const Resolution& r) { j = json{{"width", r.width}, {"height", r.height}}; }

void from_json(const json& j, Resolution& r) {
  j.at("width").get_to(r.width);
  j.at("height").get_to(r.height);
}

void to_json(json& j, const FeedbackSchedule& s) {
  j = json{{"queries_per_session", s.queries_per_session},
           {"session_interval_steps", s.session_interval_steps},
           {"total_query_budget", s.total_query_budget},
           {"reward_update_epochs", s.reward_update_epochs},
           {"policy_update_steps", s.policy_update_steps}};
}

void from_json(const json& j, FeedbackSchedule& s) {
  j.at("queries_per_session").get_to(s.queries_per_session);
  j.at("session_interval_steps").get_to(s.session_interval_steps);
  j.at("total_query_budget").get_to(s.total_query_budget);
  j.at("reward_update_epochs").get_to(s.reward_update_epochs);
  j.at("policy_update_steps").get_to(s.policy_update_steps);
}

void to_json(json& j, const RunConfig& c) {
  j = json{{"env_name", c.env_name},
           {"goal_description", c.goal_description},
           {"provider_name", c.provider_name},
           {"schedule", c.schedule},
           {"seed", c.seed},
           {"discount", c.discount},
           {"segment_length", c.segment_length},
           {"reward_input_mode", to_string(c.reward_input_mode)},
           {"render_resolution", c.render_resolution},
           {"reward_resolution", c.reward_resolution},
           {"run_dir", c.run_dir},
           {"total_steps", c.total_steps},
           {"eval_interval", c.eval_interval},
           {"eval_episodes", c.eval_episodes},
           {"warmup_steps", c.warmup_steps},
           {"replay_capacity", c.replay_capacity},
           {"image_buffer_capacity", c.image_buffer_capacity},
           {"checkpoint_interval", c.checkpoint_interval},
           {"ensemble_size", c.ensemble_size},
           {"reward_learning_rate", c.reward_learning_rate},
           {"reward_batch_size", c.reward_batch_size},
           {"early_stop_accuracy", c.early_stop_accuracy},
           {"tie_epsilon", c.tie_epsilon},
           {"session_workers", c.session_workers},
           {"backend_config", c.backend_config},
           {"unsupervised_pretraining", c.unsupervised_pretraining},
           {"audit_relabel", c.audit_relabel}};
}

void from_json(const json& j, RunConfig& c) {
  RunConfig d;  // missing optional fields keep their defaults
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  c = d;
  j.at("env_name").get_to(c.env_name);
  get("goal_description", c.goal_description);
  get("provider_name", c.provider_name);
  get("schedule", c.schedule);
  get("seed", c.seed);
  get("discount", c.discount);
  get("segment_length", c.segment_length);
  if (j.contains("reward_input_mode")) c.reward_input_mode = parse_reward_input_mode(j.at("reward_input_mode").get<std::string>());
  get("render_resolution", c.render_resolution);
  get("reward_resolution", c.reward_resolution);
  get("run_dir", c.run_dir);
  get("total_steps", c.total_steps);
  get("eval_interval", c.eval_interval);
  get("eval_episodes", c.eval_episodes);
  get("warmup_steps", c.warmup_steps);
  get("replay_capacity", c.replay_capacity);
  get("image_buffer_capacity", c.image_buffer_capacity);
  get("checkpoint_interval", c.checkpoint_interval);
  get("ensemble_size", c.ensemble_size);
  get("reward_learning_rate", c.reward_learning_rate);
  get("reward_batch_size", c.reward_batch_size);
  get("early_stop_accuracy", c.early_stop_accuracy);
  get("tie_epsilon", c.tie_epsilon);
  get("session_workers", c.session_workers);
  get("backend_config", c.backend_config);
  get("unsupervised_pretraining", c.unsupervised_pretraining);
  get("audit_relabel", c.audit_relabel);
}

void save_config(const RunConfig& config, const std::filesystem::path& file) {
  std::ofstream out(file, std::ios::trunc);
  if (!out) throw Error("cannot write " + file.string());
  out << json(config).dump(2) << '\n';
}

RunConfig load_config(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw Error("cannot read " + file.string());
  return json::parse(in).get<RunConfig>();
}

namespace {

json segment_to_json(const Segment& s, const ImageWriter& write_image) {
  json j;
  j["states"] = s.states;
  j["image"] = s.image ? json(write_image(*s.image)) : json(nullptr);
  j["progress"] = s.progress ? json(*s.progress) : json(nullptr);
  j["source_episode"] = s.source_episode;
  j["source_step"] = s.source_step;
  return j;
}

Segment segment_from_json(const json& j, const ImageReader& read_image) {
  Segment s;
  j.at("states").get_to(s.states);
  if (!j.at("image").is_null()) s.image = read_image(j.at("image").get<std::string>());
  if (!j.at("progress").is_null()) s.progress = j.at("progress").get<double>();
  j.at("source_episode").get_to(s.source_episode);
  j.at("source_step").get_to(s.source_step);
  return s;
}

}  // namespace

json record_to_json(const PreferenceRecord& r, const ImageWriter& write_image) {
  return json{{"first", segment_to_json(r.first, write_image)},
              {"second", segment_to_json(r.second, write_image)},
              {"label", r.label},
              {"provider_name", r.provider_name},
              {"raw_response", r.raw_response ? json(*r.raw_response) : json(nullptr)},
              {"query_timestamp", r.query_timestamp}};
}

PreferenceRecord record_from_json(const json& j, const ImageReader& read_image) {
  PreferenceRecord r;
  r.first = segment_from_json(j.at("first"), read_image);
  r.second = segment_from_json(j.at("second"), read_image);
  j.at("label").get_to(r.label);
  if (!is_valid_label(r.label)) throw Error("invalid label");
  j.at("provider_name").get_to(r.provider_name);
  if (!j.at("raw_response").is_null()) r.raw_response = j.at("raw_response").get<std::string>();
  j.at("query_timestamp").get_to(r.query_timestamp);
  return r;
}

PreferenceLog::PreferenceLog(std::filesystem::path run_dir)
    : run_dir_(std::move(run_dir)), file_(run_dir_ / "preferences.jsonl") {
  std::filesystem::create_directories(run_dir_ / "images");
  out_.open(file_, std::ios::app);
  if (!out_) throw Error("cannot write " + file_.string());
}

std::string PreferenceLog::store_image(const PngImage& png) {
  const std::string rel = "images/" + png.sha256 + ".png";
  if (written_.insert(png.sha256).second && !std::filesystem::exists(run_dir_ / rel)) {
    save_png(png, run_dir_ / rel);
  }
  return rel;
}

void PreferenceLog::append(const PreferenceRecord& record) {
  std::lock_guard lock(mutex_);
  const json j = record_to_json(record, [this](const PngImage& png) { return store_image(png); });
  out_ << j.dump() << '\n';
  out_.flush();
}

std::vector<PreferenceRecord> PreferenceLog::load(const std::filesystem::path& run_dir) {
  std::map<std::string, std::shared_ptr<const PngImage>> cache;
  auto read = [&](const std::string& rel) {
    auto& slot = cache[rel];
    if (!slot) slot = std::make_shared<const PngImage>(load_png(run_dir / rel));
    return slot;
  };
  std::vector<PreferenceRecord> out;
  for (const auto& j : read_jsonl(run_dir / "preferences.jsonl")) out.push_back(record_from_json(j, read));
  return out;
}

std::vector<json> read_jsonl(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw Error("cannot read " + file.string());
  std::vector<json> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    out.push_back(json::parse(line));
  }
  return out;
}

}  // namespace vlmpref
