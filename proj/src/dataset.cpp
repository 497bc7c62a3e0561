#include "stage/dataset.hpp"

#include <algorithm>
#include <fstream>

#include "json.hpp"
#include "stage/error.hpp"

namespace stage::dataset {
namespace {

namespace fs = std::filesystem;

training::Song load_song(const fs::path& dir) {
  const fs::path meta_path = dir / "meta.json";
  std::ifstream in(meta_path);
  if (!in) throw FormatError(meta_path.string() + ": cannot open");
  training::Song song;
  song.name = dir.filename().string();
  try {
    const auto meta = nlohmann::json::parse(in);
    song.spec.tempo_bpm = meta.at("tempo_bpm").get<double>();
    song.spec.key_root = meta.at("key_root").get<int>();
    song.spec.duration_s = meta.at("duration_s").get<double>();
    song.spec.sample_rate = meta.at("sample_rate").get<int>();
    for (const auto& [role_name, seed] : meta.at("stem_seeds").items()) {
      song.spec.stem_seeds[signal::parse_stem_role(role_name)] = seed.get<std::uint64_t>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(meta_path.string() + ": " + e.what());
  }
  for (const auto& [role, seed] : song.spec.stem_seeds) {
    const fs::path wav = dir / (std::string(signal::to_string(role)) + ".wav");
    song.stems[role] = signal::load_wav(wav, song.spec.sample_rate);
  }
  if (song.stems.empty()) throw FormatError(dir.string() + ": song has no stems");
  return song;
}

}  // namespace

void save(const fs::path& dir, const std::vector<training::Song>& songs) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw FormatError(dir.string() + ": " + ec.message());
  for (const auto& song : songs) {
    const fs::path song_dir = dir / song.name;
    fs::create_directories(song_dir, ec);
    if (ec) throw FormatError(song_dir.string() + ": " + ec.message());
    nlohmann::ordered_json meta;
    meta["tempo_bpm"] = song.spec.tempo_bpm;
    meta["key_root"] = song.spec.key_root;
    meta["duration_s"] = song.spec.duration_s;
    meta["sample_rate"] = song.spec.sample_rate;
    meta["stem_seeds"] = nlohmann::ordered_json::object();
    for (const auto& [role, seed] : song.spec.stem_seeds) {
      meta["stem_seeds"][std::string(signal::to_string(role))] = seed;
    }
    const fs::path meta_path = song_dir / "meta.json";
    std::ofstream out(meta_path);
    out << meta.dump(2) << "\n";
    if (!out) throw FormatError(meta_path.string() + ": write failed");
    for (const auto& [role, stem] : song.stems) {
      signal::write_wav(song_dir / (std::string(signal::to_string(role)) + ".wav"), stem);
    }
  }
}

std::vector<training::Song> load(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw FormatError(dir.string() + ": not a directory");
  std::vector<fs::path> song_dirs;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_directory() && fs::exists(entry.path() / "meta.json")) song_dirs.push_back(entry.path());
  }
  if (song_dirs.empty()) throw FormatError(dir.string() + ": no songs found");
  std::sort(song_dirs.begin(), song_dirs.end());
  std::vector<training::Song> songs;
  for (const auto& d : song_dirs) songs.push_back(load_song(d));
  return songs;
}

}  // namespace stage::dataset
