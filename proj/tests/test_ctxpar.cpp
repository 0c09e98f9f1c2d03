#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <numeric>
#include <set>

#include "ctxpar.hpp"
#include "rng.hpp"

using dv::Tensor;

namespace {

dv::VaeConfig toy_cfg() {
    dv::VaeConfig cfg;
    cfg.base_channels = 2;
    cfg.latent_channels = 2;
    cfg.blocks_per_stage = 1;
    cfg.stage_multipliers = {1, 2, 2, 2};
    return cfg;
}

dv::VaeModel toy_model(uint64_t seed) {
    dv::VaeModel m;
    m.cfg = toy_cfg();
    m.init(seed);
    return m;
}

Tensor random_video(int64_t t, int64_t hw, uint64_t seed) {
    dv::Rng rng(seed);
    return dv::randn<float>(rng, {t, hw, hw, 3}, 0.5f);
}

// messages sent for one layer index, in send order
std::vector<dv::HaloRecord> layer_msgs(const std::vector<dv::HaloRecord>& log, int layer) {
    std::vector<dv::HaloRecord> out;
    for (const auto& h : log)
        if (h.layer == layer) out.push_back(h);
    return out;
}

}  // namespace

TEST_CASE("frame split gives rank 0 the causal frame plus aligned blocks") {
    auto plan = dv::split_frames(17, 4);
    REQUIRE(plan.size() == 4);
    CHECK(plan[0].begin == 0);
    CHECK(plan[0].end == 5);
    CHECK(plan[1].begin == 5);
    CHECK(plan[1].end == 9);
    CHECK(plan[2].end == 13);
    CHECK(plan[3].end == 17);

    auto two = dv::split_frames(9, 2);
    CHECK(two[0].len() == 5);
    CHECK(two[1].len() == 4);

    auto solo = dv::split_frames(17, 1);
    REQUIRE(solo.size() == 1);
    CHECK(solo[0].begin == 0);
    CHECK(solo[0].end == 17);

    // 5 blocks over 2 ranks: earlier rank takes the remainder
    auto uneven = dv::split_frames(21, 2);
    CHECK(uneven[0].len() == 13);
    CHECK(uneven[1].len() == 8);

    CHECK_THROWS_WITH_AS((void)dv::split_frames(17, 0), "ctxpar: rank count must be positive",
                         std::runtime_error);
    CHECK_THROWS_WITH_AS((void)dv::split_frames(16, 2),
                         "ctxpar: frames must be 1 plus a multiple of the chunk block",
                         std::runtime_error);
    CHECK_THROWS_WITH_AS((void)dv::split_frames(9, 3), "ctxpar: too few frames for rank count",
                         std::runtime_error);
}

TEST_CASE("single causal conv matches serial and moves the known halo volume") {
    dv::ParamStore ps;
    dv::Rng rng(11);
    dv::LayerBuilder b{ps, rng, {}};
    b.conv("c", 3, 16, 8, 1, 1);

    dv::Rng vr(12);
    Tensor x = dv::randn<float>(vr, {17, 32, 32, 16}, 1.0f);
    Tensor serial = dv::run_layers_plain(ps, b.layers, x);

    auto run = dv::run_layers_parallel(ps, b.layers, x, 2, false);
    CHECK(dv::max_abs_diff(serial, run.output) == 0.0);

    // one boundary, kt-1 = 2 frames of (32,32,16) floats
    REQUIRE(run.halos.size() == 1);
    CHECK(run.halos[0].from_rank == 0);
    CHECK(run.halos[0].to_rank == 1);
    CHECK(run.halos[0].frames == 2);
    CHECK(run.halos[0].elements == 32768);

    auto rep = dv::comm_report(b.layers, 17, 32, 32, 16, 2);
    CHECK(rep.halo_elements == 32768);
    REQUIRE(rep.lines.size() == 1);
    CHECK(rep.lines[0].name == "c");
    CHECK(rep.ratio() > 0.0);
}

TEST_CASE("temporally strided conv assigns outputs by input ownership") {
    dv::ParamStore ps;
    dv::Rng rng(21);
    dv::LayerBuilder b{ps, rng, {}};
    b.conv("d", 3, 4, 6, 2, 2);

    dv::Rng vr(22);
    Tensor x = dv::randn<float>(vr, {17, 8, 8, 4}, 1.0f);
    Tensor serial = dv::run_layers_plain(ps, b.layers, x);
    REQUIRE(serial.shape[0] == 9);

    for (int ranks : {2, 4}) {
        auto run = dv::run_layers_parallel(ps, b.layers, x, ranks, false);
        CHECK(dv::max_abs_diff(serial, run.output) == 0.0);
        CHECK(run.halos.size() == static_cast<size_t>(ranks - 1));
    }
}

TEST_CASE("pointwise-time conv needs no halo") {
    dv::ParamStore ps;
    dv::Rng rng(31);
    dv::LayerBuilder b{ps, rng, {}};
    b.conv("p", 1, 3, 5, 1, 1);

    Tensor x = random_video(9, 8, 32);
    Tensor serial = dv::run_layers_plain(ps, b.layers, x);
    auto run = dv::run_layers_parallel(ps, b.layers, x, 2, false);
    CHECK(dv::max_abs_diff(serial, run.output) == 0.0);
    CHECK(run.halos.empty());

    auto rep = dv::comm_report(b.layers, 9, 8, 8, 3, 2);
    CHECK(rep.halo_elements == 0);
    CHECK(rep.lines[0].elements == 0);
}

TEST_CASE("full encoder is bit-identical across rank counts") {
    auto m = toy_model(7);
    Tensor video = random_video(17, 16, 77);
    Tensor serial = dv::run_layers_plain(m.ps, m.enc, video);

    // 1 stem + 8 resblock convs + 3 downsamples + 1 head conv, all kt=3
    const int causal_layers = 13;

    for (int ranks : {1, 2, 4}) {
        auto run = dv::run_layers_parallel(m.ps, m.enc, video, ranks, false);
        CHECK(dv::max_abs_diff(serial, run.output) == 0.0);
        CHECK(run.halos.size() == static_cast<size_t>((ranks - 1) * causal_layers));

        std::set<int> layers_seen;
        for (const auto& h : run.halos) layers_seen.insert(h.layer);
        CHECK(layers_seen.size() == static_cast<size_t>(ranks == 1 ? 0 : causal_layers));
        for (int layer : layers_seen) {
            auto msgs = layer_msgs(run.halos, layer);
            REQUIRE(msgs.size() == static_cast<size_t>(ranks - 1));
            for (const auto& h : msgs) {
                CHECK(h.to_rank == h.from_rank + 1);  // strictly forward
                CHECK(h.frames == 2);
            }
        }
    }

    // shorter stream, {5,4} split
    Tensor short_video = random_video(9, 16, 78);
    Tensor short_serial = dv::run_layers_plain(m.ps, m.enc, short_video);
    auto short_run = dv::run_layers_parallel(m.ps, m.enc, short_video, 2, false);
    CHECK(dv::max_abs_diff(short_serial, short_run.output) == 0.0);
}

TEST_CASE("threaded and sequential execution agree bitwise") {
    auto m = toy_model(9);
    Tensor video = random_video(17, 16, 99);
    auto seq = dv::run_layers_parallel(m.ps, m.enc, video, 4, false);
    auto thr = dv::run_layers_parallel(m.ps, m.enc, video, 4, true);
    CHECK(dv::max_abs_diff(seq.output, thr.output) == 0.0);
    CHECK(seq.halos.size() == thr.halos.size());
    Tensor serial = dv::run_layers_plain(m.ps, m.enc, video);
    CHECK(dv::max_abs_diff(serial, thr.output) == 0.0);
}

TEST_CASE("halo bus rejects protocol violations") {
    dv::HaloBus bus(false);
    CHECK_THROWS_WITH_AS((void)bus.recv(0, 0, 2), "ctxpar: missing halo message",
                         std::runtime_error);

    CHECK_THROWS_WITH_AS(bus.send(0, 0, 2, Tensor({2, 4, 4, 3})),
                         "ctxpar: halo must flow to the next rank", std::runtime_error);

    bus.send(3, 0, 1, Tensor({3, 4, 4, 3}));
    CHECK_THROWS_WITH_AS((void)bus.recv(3, 0, 2), "ctxpar: halo has wrong temporal length",
                         std::runtime_error);

    // receiver already consumed layer 3; an earlier layer arriving later is stale
    bus.send(1, 0, 1, Tensor({2, 4, 4, 3}));
    CHECK_THROWS_WITH_AS((void)bus.recv(1, 0, 2), "ctxpar: halo received out of order",
                         std::runtime_error);
}

TEST_CASE("comm report totals match an independent count and the live run") {
    auto m = toy_model(5);
    // (kt-1) * H * W * Cin per boundary for each causal conv of the toy
    // encoder: stem 2*16*16*3, stage-0 convs 2*16*16*2 each, down0 likewise,
    // stage-1 and down1 at 2*8*8*4, stage-2 and down2 at 2*4*4*4, stage-3 and
    // head at 2*2*2*4.
    const int64_t expected = 1536 + 3 * 1024 + 3 * 512 + 3 * 128 + 3 * 32;
    auto rep = dv::comm_report(m.enc, 17, 16, 16, 3, 2);
    CHECK(rep.halo_elements == expected);
    CHECK(rep.ratio() > 0.0);
    CHECK(rep.ratio() < 1.0);

    Tensor video = random_video(17, 16, 55);
    auto run = dv::run_layers_parallel(m.ps, m.enc, video, 2, false);
    int64_t moved = 0;
    for (const auto& h : run.halos) moved += h.elements;
    CHECK(moved == expected);

    // doubling the boundaries scales the traffic by (ranks-1)
    auto rep4 = dv::comm_report(m.enc, 17, 16, 16, 3, 4);
    CHECK(rep4.halo_elements == 3 * expected);
}

TEST_CASE("decoder upsamplers are rejected in chunked mode") {
    auto m = toy_model(3);
    dv::Rng rng(4);
    Tensor latent = dv::randn<float>(rng, {5, 2, 2, 2}, 1.0f);
    CHECK_THROWS_WITH_AS((void)dv::run_layers_parallel(m.ps, m.dec, latent, 2, false, 1),
                         "ctxpar: layer kind not supported in chunked mode", std::runtime_error);
}
