#pragma once

#include <fstream>
#include <string>
#include <vector>

#include "lcv2i/comm.hpp"
#include "lcv2i/config.hpp"
#include "lcv2i/encoders.hpp"
#include "lcv2i/fusion.hpp"

namespace lcv2i {

// One shared network for both agents, per the collaborative setup.
struct ModelParams {
  PillarEncoderParams pillar;
  ImageEncoderParams image;
  VwfParams vwf;
  FocmParams focm;
  FuseParams fuse;
  DecoderParams decoder;

  static ModelParams init(const ExperimentConfig& cfg, std::uint64_t seed) {
    Rng rng(seed ^ 0xA5A5A5A5DEADBEEFULL);
    ModelParams m;
    m.pillar = PillarEncoderParams::init(cfg.grid_channels, rng);
    m.image = ImageEncoderParams::init(cfg.grid_channels, rng);
    m.vwf = VwfParams::init(cfg.grid_channels, cfg.num_scales, cfg.samples_per_point, rng);
    m.focm = FocmParams::init(cfg.grid_channels, rng);
    m.fuse = FuseParams::init(cfg.grid_channels, rng);
    m.decoder = DecoderParams::init(cfg.grid_channels, rng);
    return m;
  }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> ps;
    for (auto* p : pillar.parameters()) ps.push_back(p);
    for (auto* p : image.parameters()) ps.push_back(p);
    for (auto* p : vwf.parameters()) ps.push_back(p);
    for (auto* p : focm.parameters()) ps.push_back(p);
    for (auto* p : fuse.parameters()) ps.push_back(p);
    for (auto* p : decoder.parameters()) ps.push_back(p);
    return ps;
  }

  void save(const std::string& path) {
    std::ofstream f(path);
    if (!f) throw ConfigError("ModelParams::save: cannot open " + path);
    f << "# lcv2i model parameters\n";
    char buf[64];
    for (Parameter* p : parameters()) {
      f << "param " << p->name();
      for (auto d : p->value().shape) f << " " << d;
      f << "\n";
      for (std::size_t i = 0; i < p->value().numel(); ++i) {
        std::snprintf(buf, sizeof(buf), "%.17g", p->value().data[i]);
        f << buf << (i + 1 == p->value().numel() ? "" : " ");
      }
      f << "\n";
    }
  }

  void load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("ModelParams::load: cannot open " + path);
    std::string line;
    std::map<std::string, Parameter*> by_name;
    for (Parameter* p : parameters()) by_name[p->name()] = p;
    std::size_t loaded = 0;
    while (std::getline(f, line)) {
      if (line.empty() || line[0] == '#') continue;
      std::istringstream ls(line);
      std::string tag, name;
      ls >> tag >> name;
      if (tag != "param") throw ConfigError("ModelParams::load: expected 'param', got " + tag);
      std::vector<std::size_t> shape;
      std::size_t d;
      while (ls >> d) shape.push_back(d);
      auto it = by_name.find(name);
      if (it == by_name.end()) throw ConfigError("ModelParams::load: unknown parameter " + name);
      if (it->second->value().shape != shape)
        throw ConfigError("ModelParams::load: shape mismatch for " + name);
      if (!std::getline(f, line)) throw ConfigError("ModelParams::load: missing values for " + name);
      std::istringstream vs(line);
      for (double& v : it->second->mutable_value().data)
        if (!(vs >> v)) throw ConfigError("ModelParams::load: short values for " + name);
      ++loaded;
    }
    if (loaded != by_name.size())
      throw ConfigError("ModelParams::load: file holds " + std::to_string(loaded) + " of " +
                        std::to_string(by_name.size()) + " parameters");
  }
};

}  // namespace lcv2i
