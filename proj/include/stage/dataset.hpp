#pragma once

#include <filesystem>
#include <vector>

#include "stage/training.hpp"

namespace stage::dataset {

// Layout: <dir>/<song name>/{drums,bass,chords}.wav plus meta.json holding
// tempo_bpm, key_root, duration_s, sample_rate, and the per-stem seeds.
void save(const std::filesystem::path& dir, const std::vector<training::Song>& songs);
// Loads every song subdirectory, sorted by name.
std::vector<training::Song> load(const std::filesystem::path& dir);

}  // namespace stage::dataset
