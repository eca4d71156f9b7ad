#pragma once

#include <initializer_list>
#include <vector>

namespace splitmeanflow::instrument {

// Network evaluations seen by one branch of a training step.
struct PassCounts {
  long forwards = 0;          // student network forwards (plain or taped)
  long jvps = 0;              // forward-mode dual evaluations
  long backwards = 0;         // reverse sweeps over a tape
  long teacher_forwards = 0;  // frozen teacher evaluations

  friend bool operator==(const PassCounts&, const PassCounts&) = default;
};

// While alive, every noted event is added to each sink. Scopes nest; the
// innermost scope's sinks are the active set.
class CountScope {
 public:
  CountScope(std::initializer_list<PassCounts*> sinks);
  ~CountScope();
  CountScope(const CountScope&) = delete;
  CountScope& operator=(const CountScope&) = delete;

 private:
  std::vector<PassCounts*> previous_;
};

// Forwards noted inside a TeacherScope count as teacher_forwards.
class TeacherScope {
 public:
  TeacherScope();
  ~TeacherScope();
  TeacherScope(const TeacherScope&) = delete;
  TeacherScope& operator=(const TeacherScope&) = delete;
};

void note_forward();
void note_jvp();
void note_backward();

}  // namespace splitmeanflow::instrument
