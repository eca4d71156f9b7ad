#include "splitmeanflow/instrument.hpp"

namespace splitmeanflow::instrument {
namespace {

struct State {
  std::vector<PassCounts*> sinks;
  int teacher_depth = 0;
};

State& state() {
  thread_local State s;
  return s;
}

}  // namespace

CountScope::CountScope(std::initializer_list<PassCounts*> sinks) : previous_(state().sinks) {
  state().sinks.assign(sinks.begin(), sinks.end());
}

CountScope::~CountScope() { state().sinks = std::move(previous_); }

TeacherScope::TeacherScope() { ++state().teacher_depth; }
TeacherScope::~TeacherScope() { --state().teacher_depth; }

void note_forward() {
  auto& s = state();
  for (auto* sink : s.sinks) {
    if (s.teacher_depth > 0) {
      ++sink->teacher_forwards;
    } else {
      ++sink->forwards;
    }
  }
}

void note_jvp() {
  for (auto* sink : state().sinks) ++sink->jvps;
}

void note_backward() {
  for (auto* sink : state().sinks) ++sink->backwards;
}

}  // namespace splitmeanflow::instrument
