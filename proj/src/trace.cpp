#include "nse/trace.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace nse {

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
}

std::string escape_xml(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string grid_csv(const std::vector<Vec>& rows,
                     const std::vector<std::string>& header) {
  std::ostringstream out;
  out << "step";
  for (const std::string& h : header) out << ',' << h;
  out << '\n';
  for (std::size_t t = 0; t < rows.size(); ++t) {
    out << (t + 1);
    for (Eigen::Index j = 0; j < rows[t].size(); ++j)
      out << ',' << fmt(rows[t](j));
    out << '\n';
  }
  return out.str();
}

// Grayscale heatmap: value 0 renders dark, 1 light. Query tokens label the
// columns, steps label the rows.
std::string grid_svg(const std::vector<Vec>& rows,
                     const std::vector<std::string>& header,
                     const std::string& title) {
  const int cell = 28;
  const int left = 60, top = 70;
  const int ncols = static_cast<int>(header.size());
  const int nrows = static_cast<int>(rows.size());
  const int width = left + ncols * cell + 20;
  const int height = top + nrows * cell + 20;

  std::ostringstream out;
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width
      << "\" height=\"" << height << "\">\n";
  out << "<text x=\"" << left << "\" y=\"16\" font-size=\"13\" "
         "font-family=\"monospace\">"
      << escape_xml(title) << "</text>\n";
  for (int j = 0; j < ncols; ++j)
    out << "<text x=\"" << left + j * cell + cell / 2 << "\" y=\"" << top - 8
        << "\" font-size=\"10\" font-family=\"monospace\" "
           "text-anchor=\"middle\">"
        << escape_xml(header[j]) << "</text>\n";
  for (int t = 0; t < nrows; ++t) {
    out << "<text x=\"" << left - 8 << "\" y=\""
        << top + t * cell + cell / 2 + 4
        << "\" font-size=\"10\" font-family=\"monospace\" "
           "text-anchor=\"end\">t=" << (t + 1) << "</text>\n";
    for (int j = 0; j < ncols; ++j) {
      double v = std::clamp(rows[t](j), 0.0, 1.0);
      int shade = static_cast<int>(v * 255.0 + 0.5);
      char color[8];
      std::snprintf(color, sizeof color, "#%02x%02x%02x", shade, shade,
                    shade);
      out << "<rect x=\"" << left + j * cell << "\" y=\"" << top + t * cell
          << "\" width=\"" << cell << "\" height=\"" << cell << "\" fill=\""
          << color << "\" stroke=\"#404040\"/>\n";
    }
  }
  out << "</svg>\n";
  return out.str();
}

}  // namespace

TraceFiles write_trace(const std::string& out_dir, const std::string& stem,
                       const ForwardResult& result, const HaltingMode& mode,
                       const std::vector<std::string>& query_tokens,
                       const std::vector<std::string>& doc_tokens) {
  if (result.steps.empty()) throw std::runtime_error("write_trace: no steps");
  const std::string base = out_dir + "/" + stem;
  TraceFiles files;

  std::vector<Vec> z_rows, g_rows;
  for (const StepTrace& s : result.steps) {
    z_rows.push_back(s.z_q);
    if (mode.variant == HaltingVariant::QueryGating) g_rows.push_back(s.g_q);
  }

  files.memory_key_csv = base + "_memory_key.csv";
  write_file(files.memory_key_csv, grid_csv(z_rows, query_tokens));
  files.memory_key_svg = base + "_memory_key.svg";
  write_file(files.memory_key_svg,
             grid_svg(z_rows, query_tokens, "memory key z"));

  if (mode.variant == HaltingVariant::QueryGating) {
    files.gate_csv = base + "_gate.csv";
    write_file(files.gate_csv, grid_csv(g_rows, query_tokens));
    files.gate_svg = base + "_gate.svg";
    write_file(files.gate_svg, grid_svg(g_rows, query_tokens, "query gate g"));
  } else {
    std::ostringstream halt;
    halt << "step,e,p\n";
    for (std::size_t t = 0; t < result.steps.size(); ++t) {
      const StepTrace& s = result.steps[t];
      halt << (t + 1) << ','
           << (s.e >= 0.0 ? fmt(s.e) : std::string("")) << ',' << fmt(s.p)
           << '\n';
    }
    files.halting_csv = base + "_halting.csv";
    write_file(files.halting_csv, halt.str());
  }

  // Top-3 attended document words per step.
  std::ostringstream top;
  top << "step,rank,token,attention\n";
  for (std::size_t t = 0; t < result.steps.size(); ++t) {
    const Vec& att = result.steps[t].attention_d;
    std::vector<int> order(att.size());
    for (int i = 0; i < att.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&att](int a, int b) {
      return att(a) > att(b);
    });
    const int limit = std::min<int>(3, static_cast<int>(order.size()));
    for (int r = 0; r < limit; ++r) {
      const int i = order[r];
      const std::string tok = i < static_cast<int>(doc_tokens.size())
                                  ? doc_tokens[i]
                                  : "<pad>";
      top << (t + 1) << ',' << (r + 1) << ',' << tok << ',' << fmt(att(i))
          << '\n';
    }
  }
  files.top_words_csv = base + "_top_words.csv";
  write_file(files.top_words_csv, top.str());
  return files;
}

}  // namespace nse
