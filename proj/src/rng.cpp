#include "sacnet/rng.hpp"

#include <cstdio>
#include <sstream>

namespace sacnet {

std::string Rng::state() const {
  std::ostringstream os;
  os << engine_ << " " << (has_spare_ ? 1 : 0);
  if (has_spare_) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", spare_);
    os << " " << buf;
  }
  return os.str();
}

void Rng::set_state(const std::string& s) {
  std::istringstream is(s);
  is >> engine_;
  int flag = 0;
  is >> flag;
  has_spare_ = (flag != 0);
  spare_ = 0.0;
  if (has_spare_) is >> spare_;
}

}  // namespace sacnet
