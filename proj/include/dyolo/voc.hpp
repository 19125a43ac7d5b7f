#pragma once

// VOC-style XML annotations. Files store 1-based inclusive pixel indices;
// in memory boxes are continuous with exclusive max edges, so
// xmin_mem = xmin_xml - 1 and xmax_mem = xmax_xml.

#include <boost/property_tree/ptree.hpp>
#include <boost/property_tree/xml_parser.hpp>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "dyolo/boxes.hpp"

namespace dyolo {

struct Annotation {
  std::string filename;
  int width = 0;
  int height = 0;
  std::vector<GroundTruthBox> objects;
  int dropped = 0;  // objects whose class is outside the five-class set
};

inline void write_voc(const std::filesystem::path& path, const Annotation& ann) {
  namespace pt = boost::property_tree;
  pt::ptree root;
  pt::ptree& a = root.add("annotation", "");
  a.put("filename", ann.filename);
  a.put("size.width", ann.width);
  a.put("size.height", ann.height);
  a.put("size.depth", 3);
  for (const auto& obj : ann.objects) {
    pt::ptree o;
    o.put("name", class_name(obj.class_id));
    o.put("difficult", obj.difficult ? 1 : 0);
    o.put("bndbox.xmin", static_cast<long>(std::lround(obj.box.xmin)) + 1);
    o.put("bndbox.ymin", static_cast<long>(std::lround(obj.box.ymin)) + 1);
    o.put("bndbox.xmax", static_cast<long>(std::lround(obj.box.xmax)));
    o.put("bndbox.ymax", static_cast<long>(std::lround(obj.box.ymax)));
    a.add_child("object", o);
  }
  try {
    pt::write_xml(path.string(), root, std::locale(), pt::xml_writer_make_settings<std::string>(' ', 2));
  } catch (const pt::xml_parser_error& e) {
    throw IoError(std::string("write_voc: ") + e.what());
  }
}

inline Annotation read_voc(const std::filesystem::path& path) {
  namespace pt = boost::property_tree;
  pt::ptree root;
  try {
    pt::read_xml(path.string(), root, pt::xml_parser::trim_whitespace);
  } catch (const pt::xml_parser_error& e) {
    throw IoError(std::string("read_voc: ") + e.what());
  }
  const auto& a = root.get_child("annotation");
  Annotation ann;
  ann.filename = a.get<std::string>("filename", "");
  ann.width = a.get<int>("size.width", 0);
  ann.height = a.get<int>("size.height", 0);
  for (const auto& [key, node] : a) {
    if (key != "object") continue;
    const auto id = class_id_from_name(node.get<std::string>("name", ""));
    if (!id) {
      ++ann.dropped;
      continue;
    }
    GroundTruthBox gt;
    gt.class_id = *id;
    gt.difficult = node.get<int>("difficult", 0) != 0;
    gt.box = Box{node.get<double>("bndbox.xmin") - 1, node.get<double>("bndbox.ymin") - 1,
                 node.get<double>("bndbox.xmax"), node.get<double>("bndbox.ymax")};
    if (!gt.box.valid()) throw ValidationError("read_voc: degenerate box in " + path.string());
    ann.objects.push_back(gt);
  }
  return ann;
}

}  // namespace dyolo
