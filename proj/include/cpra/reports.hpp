#pragma once

// CSV exports shared by the command-line tool and the tests.

#include <iomanip>
#include <ostream>
#include <string>
#include <vector>

#include "cpra/context.hpp"

namespace cpra {

struct MetricRow {
  std::string image;
  double psnr_db = 0.0;
  double ssim = 0.0;
};

// One row per (layer, batch item, head). k and p are shared by the heads of a
// layer, so the rows of one layer differ only in the head column.
inline void write_trace_csv(const std::vector<LayerTrace>& traces, std::ostream& os) {
  os << "layer,head,p,k,retained_fraction\n" << std::setprecision(9);
  for (const auto& t : traces) {
    const std::string layer = t.item == 0 ? t.layer : t.layer + "#" + std::to_string(t.item);
    for (int h = 0; h < t.heads; ++h)
      os << layer << ',' << h << ',' << t.trace.p << ',' << t.trace.k_per_head << ',' << t.trace.retained_fraction
         << '\n';
  }
}

inline void write_metrics_csv(const std::vector<MetricRow>& rows, std::ostream& os) {
  os << "image,psnr_db,ssim\n" << std::fixed;
  for (const auto& r : rows)
    os << r.image << ',' << std::setprecision(4) << r.psnr_db << ',' << std::setprecision(6) << r.ssim << '\n';
  os.unsetf(std::ios::floatfield);
}

inline void write_imag_energy_csv(const std::vector<ImagEnergy>& rows, std::ostream& os) {
  os << "layer,discarded_imag,kept_real\n" << std::setprecision(9);
  for (const auto& r : rows) os << r.layer << ',' << r.discarded_imag << ',' << r.kept_real << '\n';
}

}  // namespace cpra
