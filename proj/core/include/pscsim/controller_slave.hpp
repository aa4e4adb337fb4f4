#pragma once

#include "pscsim/controller.hpp"
#include "pscsim/link.hpp"

namespace pscsim::psc {

/// Serves link frames against a controller's register file.
///
///   READ addr            -> ACK [word]
///   WRITE addr [w]       -> ACK [] or NAK [reason]
///   BLOCK_WRITE addr [..]-> consecutive registers; DL_DATA is a FIFO port, so
///                           every word lands on it. Stops at the first NAK.
///   BLOCK_READ addr [n]  -> ACK [n words]
class ControllerSlave : public link::Slave {
 public:
  explicit ControllerSlave(Controller& c) : controller_(c) {}

  link::Frame service(const link::Frame& request) override;
  void link_flags_changed(bool tx_broken, bool rx_broken) override {
    controller_.set_link_flags(tx_broken, rx_broken);
  }

 private:
  Controller& controller_;
};

}  // namespace pscsim::psc
