#include <benchmark/benchmark.h>

#include <random>

#include "pscsim/controller.hpp"
#include "pscsim/frame.hpp"
#include "pscsim/magnet_plant.hpp"
#include "pscsim/ps_class.hpp"
#include "pscsim/scenario.hpp"
#include "pscsim/sim_core.hpp"

using namespace pscsim;

namespace {

link::Frame random_frame(std::mt19937_64& rng, std::size_t words) {
  link::Frame f;
  f.prio = rng() & 1;
  f.opcode = link::Opcode::kBlockWrite;
  f.addr = static_cast<std::uint8_t>(rng());
  for (std::size_t i = 0; i < words; ++i) f.payload.push_back(static_cast<std::uint32_t>(rng()));
  return f;
}

void BM_FrameEncode(benchmark::State& state) {
  std::mt19937_64 rng(1);
  const auto f = random_frame(rng, static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(link::encode_frame(f));
  state.SetItemsProcessed(state.iterations());
}
BENCHMARK(BM_FrameEncode)->Arg(1)->Arg(16)->Arg(256);

void BM_FrameDecode(benchmark::State& state) {
  std::mt19937_64 rng(2);
  const auto bytes = link::encode_frame(random_frame(rng, static_cast<std::size_t>(state.range(0))));
  for (auto _ : state) benchmark::DoNotOptimize(link::decode_frame(bytes));
  state.SetItemsProcessed(state.iterations());
}
BENCHMARK(BM_FrameDecode)->Arg(1)->Arg(16)->Arg(256);

void BM_ControllerTick(benchmark::State& state) {
  sim::Scheduler sched;
  const auto cls = default_classes().at("quadrupole");
  plant::Magnet magnet(cls.params, 20e-6);
  psc::Controller ctrl("Q", &magnet, psc::ControllerConfig::tuned(cls.params, cls.f_c), sched);
  ctrl.reg_write(psc::reg::kISet, psc::float_to_word(50.0f), psc::Origin::kFrontPanel);
  ctrl.reg_write(psc::reg::kMode, 1, psc::Origin::kFrontPanel);
  for (auto _ : state) ctrl.tick();
  state.SetItemsProcessed(state.iterations());
}
BENCHMARK(BM_ControllerTick);

void BM_SchedulerEvents(benchmark::State& state) {
  for (auto _ : state) {
    sim::Scheduler sched;
    std::uint64_t fired = 0;
    for (int i = 0; i < 10'000; ++i) sched.schedule_at(i * 20'000 + (i % 7), [&fired] { ++fired; });
    sched.advance_until(10'000LL * 20'000);
    benchmark::DoNotOptimize(fired);
  }
  state.SetItemsProcessed(state.iterations() * 10'000);
}
BENCHMARK(BM_SchedulerEvents);

// 50 correctors plus channel server, one virtual second per iteration
void BM_FacilitySecond(benchmark::State& state) {
  for (auto _ : state) {
    state.PauseTiming();
    auto sc = scenario::load_scenario(std::string(PSCSIM_SCENARIO_DIR) + "/ramp50.json");
    sc.run.until = 1.0;
    scenario::Facility f(std::move(sc));
    state.ResumeTiming();
    f.run();
  }
}
BENCHMARK(BM_FacilitySecond)->Unit(benchmark::kMillisecond)->Iterations(3);

}  // namespace

BENCHMARK_MAIN();
