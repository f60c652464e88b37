#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <set>

#include "segkd/trainer.hpp"

using namespace segkd;

namespace {

SyntheticTaskSpec tiny_task() {
  SyntheticTaskSpec spec;
  spec.volume_size = {16, 16, 16};
  spec.num_classes = 3;
  spec.num_train = 2;
  spec.num_val = 1;
  spec.noise_sigma = 0.2;
  spec.seed = 77;
  return spec;
}

NetworkPlan tiny_plan(double alpha = 1.0) {
  NetworkPlan p;
  p.num_classes = 3;
  p.num_stages = 2;
  p.base_width = 4;
  p.max_width = 8;
  p.convs_per_stage = 1;
  p.alpha = alpha;
  p.patch_size = {8, 8, 8};
  return p;
}

TrainRunConfig tiny_run(uint64_t seed) {
  TrainRunConfig run;
  run.plan = tiny_plan();
  run.epochs = 2;
  run.batch_size = 1;
  run.patches_per_epoch = 4;
  run.seed = seed;
  return run;
}

std::vector<uint8_t> weights_of(const Network& net) { return save_checkpoint(net); }

}  // namespace

TEST_CASE("synthetic datasets are deterministic in the seed and cover all classes") {
  const SyntheticTaskSpec spec = tiny_task();
  const Dataset a = generate_dataset(spec);
  const Dataset b = generate_dataset(spec);
  REQUIRE(a.train.size() == 2);
  REQUIRE(a.val.size() == 1);
  for (size_t i = 0; i < a.train.size(); ++i) {
    CHECK(a.train[i].labels.labels == b.train[i].labels.labels);
    for (int64_t j = 0; j < a.train[i].image.data.numel(); ++j)
      CHECK(a.train[i].image.data[j] == b.train[i].image.data[j]);
  }
  // Every volume contains every class.
  for (const auto& grp : {a.train, a.val})
    for (const auto& s : grp) {
      std::set<int32_t> seen(s.labels.labels.begin(), s.labels.labels.end());
      for (int32_t c = 0; c < 3; ++c) CHECK(seen.count(c) == 1);
      CHECK(s.labels.labels.size() == size_t(16 * 16 * 16));
      CHECK(s.image.data.all_finite());
    }
  REQUIRE(a.class_voxel_fraction.size() == 3);
  double total = 0.0;
  for (double f : a.class_voxel_fraction) total += f;
  CHECK(total == doctest::Approx(1.0));

  SyntheticTaskSpec other = spec;
  other.seed = 78;
  const Dataset c = generate_dataset(other);
  CHECK(a.train[0].labels.labels != c.train[0].labels.labels);
}

TEST_CASE("nested ellipsoid labels are spatially nested") {
  // Class k+1 voxels form a subset of the region enclosed by class k's
  // ellipsoid, so a voxel of the innermost class is surrounded by lower
  // classes along any ray to the border. Cheap proxy: the bounding box of
  // class 2 lies inside the bounding box of class >= 1.
  const Dataset d = generate_dataset(tiny_task());
  for (const auto& s : d.train) {
    std::array<int64_t, 6> bb1{99, 99, 99, -1, -1, -1}, bb2{99, 99, 99, -1, -1, -1};
    const auto& sh = s.labels.shape;
    for (int64_t z = 0; z < sh[0]; ++z)
      for (int64_t y = 0; y < sh[1]; ++y)
        for (int64_t x = 0; x < sh[2]; ++x) {
          const int32_t v = s.labels.labels[size_t((z * sh[1] + y) * sh[2] + x)];
          auto upd = [&](std::array<int64_t, 6>& bb) {
            bb[0] = std::min(bb[0], z); bb[1] = std::min(bb[1], y); bb[2] = std::min(bb[2], x);
            bb[3] = std::max(bb[3], z); bb[4] = std::max(bb[4], y); bb[5] = std::max(bb[5], x);
          };
          if (v >= 1) upd(bb1);
          if (v == 2) upd(bb2);
        }
    for (int i = 0; i < 3; ++i) CHECK(bb2[i] >= bb1[i]);
    for (int i = 3; i < 6; ++i) CHECK(bb2[i] <= bb1[i]);
  }
}

TEST_CASE("zero noise yields images equal to their label values") {
  SyntheticTaskSpec spec = tiny_task();
  spec.noise_sigma = 0.0;
  const Dataset d = generate_dataset(spec);
  const auto& s = d.train[0];
  for (size_t i = 0; i < s.labels.labels.size(); ++i)
    CHECK(s.image.data[int64_t(i)] == doctest::Approx(double(s.labels.labels[i])));
}

TEST_CASE("training runs are bit-reproducible for a fixed config and seed") {
  const Dataset data = generate_dataset(tiny_task());
  const TrainResult a = train(tiny_run(5), data);
  const TrainResult b = train(tiny_run(5), data);
  CHECK(weights_of(a.net) == weights_of(b.net));
  CHECK(a.log.to_lines() == b.log.to_lines());
  const TrainResult c = train(tiny_run(6), data);
  CHECK(weights_of(a.net) != weights_of(c.net));
}

TEST_CASE("training reduces the loss on the tiny synthetic task") {
  SyntheticTaskSpec task = tiny_task();
  task.noise_sigma = 0.05;
  const Dataset data = generate_dataset(task);
  TrainRunConfig run = tiny_run(1);
  run.epochs = 6;
  run.patches_per_epoch = 8;
  const TrainResult res = train(run, data);
  REQUIRE(res.log.epochs.size() == 6);
  CHECK(res.log.epochs.back().total < res.log.epochs.front().total);
  CHECK_FALSE(res.log.aborted_on_nan);
  CHECK(res.log.student_forwards == res.log.student_backwards);
  CHECK(res.log.teacher_forwards == 0);
}

TEST_CASE("lambda = 0 distillation is byte-identical to plain training") {
  const Dataset data = generate_dataset(tiny_task());
  const Network teacher = [&] {
    Network t = train(tiny_run(9), data).net;
    t.freeze();
    return t;
  }();

  TrainRunConfig plain = tiny_run(3);
  TrainRunConfig kd = tiny_run(3);
  kd.teacher = &teacher;
  kd.distill = DistillConfig{2.0f, 0.0f};

  const TrainResult a = train(plain, data);
  const TrainResult b = train(kd, data);
  CHECK(weights_of(a.net) == weights_of(b.net));
  // Budget parity bookkeeping: student work identical, teacher logged apart.
  CHECK(a.log.student_forwards == b.log.student_forwards);
  CHECK(a.log.student_backwards == b.log.student_backwards);
  CHECK(a.log.teacher_forwards == 0);
  CHECK(b.log.teacher_forwards > 0);
}

TEST_CASE("distillation config and teacher must come together and match classes") {
  const Dataset data = generate_dataset(tiny_task());
  TrainRunConfig run = tiny_run(1);
  run.distill = DistillConfig{};
  CHECK_THROWS_AS(train(run, data), std::invalid_argument);  // distill without teacher

  Network teacher = Network::build(tiny_plan(), 1);
  teacher.freeze();
  TrainRunConfig run2 = tiny_run(1);
  run2.teacher = &teacher;
  CHECK_THROWS_AS(train(run2, data), std::invalid_argument);  // teacher without distill

  Network unfrozen = Network::build(tiny_plan(), 1);
  TrainRunConfig run3 = tiny_run(1);
  run3.teacher = &unfrozen;
  run3.distill = DistillConfig{};
  CHECK_THROWS_AS(train(run3, data), std::invalid_argument);  // teacher not frozen
}

TEST_CASE("the teacher is bit-identical before and after a distillation run") {
  const Dataset data = generate_dataset(tiny_task());
  Network teacher = Network::build(tiny_plan(), 21);
  teacher.freeze();
  const std::vector<uint8_t> before = save_checkpoint(teacher);
  TrainRunConfig run = tiny_run(4);
  run.teacher = &teacher;
  run.distill = DistillConfig{2.0f, 1.0f};
  train(run, data);
  CHECK(save_checkpoint(teacher) == before);
}

TEST_CASE("train log lines carry one record per epoch") {
  const Dataset data = generate_dataset(tiny_task());
  const TrainResult res = train(tiny_run(2), data);
  const std::string lines = res.log.to_lines();
  CHECK(std::count(lines.begin(), lines.end(), '\n') >= 2);
  CHECK(lines.find("epoch") != std::string::npos);
}

TEST_CASE("comparison suite produces teacher plus two rows per alpha") {
  SyntheticTaskSpec task = tiny_task();
  task.num_train = 1;
  const Dataset data = generate_dataset(task);
  TrainRunConfig proto = tiny_run(0);
  proto.epochs = 1;
  proto.patches_per_epoch = 2;
  const ComparisonTable table = run_comparison_suite(data, proto, {1.0, 0.5}, {1, 2}, DistillConfig{2.0f, 1.0f});
  REQUIRE(table.rows.size() == 1 + 2 * 2);  // teacher + (student, student+KD) x 2 alphas
  CHECK(table.rows[0].alpha == doctest::Approx(1.0));
  for (const auto& row : table.rows) {
    CHECK(row.params > 0);
    CHECK(row.dice_mean >= 0.0);
    CHECK(row.dice_mean <= 1.0);
  }
  CHECK(table.rows[1].seeds == 2);
  // Halved-width students carry fewer parameters than full width.
  CHECK(table.rows[3].params < table.rows[1].params);
  const std::string tsv = table.to_delimited();
  CHECK(tsv.find('\t') != std::string::npos);
  CHECK(table.to_table().find("alpha") != std::string::npos);
}
