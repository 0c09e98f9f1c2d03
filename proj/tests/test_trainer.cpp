#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "../src/trainer.hpp"

using namespace dv;

namespace {

VaeConfig toy_vae_cfg() {
    VaeConfig cfg;
    cfg.base_channels = 2;
    cfg.latent_channels = 2;
    cfg.blocks_per_stage = 1;
    cfg.stage_multipliers = {1, 2, 2, 2};
    return cfg;
}

DitConfig toy_dit_cfg() {
    DitConfig cfg;
    cfg.d_model = 32;
    cfg.n_heads = 2;
    cfg.n_layers = 2;
    cfg.latent_channels = 2;
    cfg.vocab = 24;
    cfg.t_emb_dim = 32;
    cfg.grid_t = 5;
    cfg.grid_y = 2;
    cfg.grid_x = 2;
    return cfg;
}

std::vector<Clip> toy_clips(int64_t n, int64_t size = 16) {
    SynthSpec spec;
    spec.num_clips = n;
    spec.size = size;
    spec.seed = 12;
    return make_clips(spec);
}

DitTrainOpts toy_opts() {
    DitTrainOpts opts;
    opts.n_ranks = 2;
    opts.pack_tokens = 32;
    opts.t_diff = 100;
    return opts;
}

bool tensors_equal(const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape) return false;
    for (int64_t i = 0; i < a.numel(); ++i)
        if (a[i] != b[i]) return false;
    return true;
}

}  // namespace

TEST_CASE("vae training resumes from a checkpoint without a seam") {
    auto clips = toy_clips(6);
    VaeConfig cfg = toy_vae_cfg();
    cfg.gan_warmup_steps = 3;  // the run crosses into the adversarial phase

    VaeTrainer straight;
    straight.init(cfg, 9);
    std::vector<double> ref;
    for (int i = 0; i < 8; ++i) ref.push_back(straight.step_once(clips).loss);

    VaeTrainer first;
    first.init(cfg, 9);
    for (int i = 0; i < 4; ++i) first.step_once(clips);
    const std::string blob = serialize_checkpoint(vae_trainer_checkpoint(first));

    Checkpoint ck = deserialize_checkpoint(blob);
    VaeTrainer resumed;
    resumed.init(vae_cfg_from_checkpoint(ck), 0);  // seed is irrelevant, state is loaded
    vae_trainer_restore(resumed, ck);
    CHECK(resumed.step == 4);
    for (int i = 4; i < 8; ++i) CHECK(resumed.step_once(clips).loss == ref[(size_t)i]);
}

TEST_CASE("vae restore refuses a mismatched architecture") {
    VaeTrainer tr;
    tr.init(toy_vae_cfg(), 9);
    Checkpoint ck = vae_trainer_checkpoint(tr);
    VaeConfig other = toy_vae_cfg();
    other.base_channels = 4;
    VaeTrainer wrong;
    wrong.init(other, 9);
    CHECK_THROWS_WITH(vae_trainer_restore(wrong, ck), "checkpoint: vae config mismatch");
}

TEST_CASE("vae trainer aborts after a sustained loss blow-up") {
    auto clips = toy_clips(2, 8);
    VaeTrainer tr;
    tr.init(toy_vae_cfg(), 3);
    tr.frames_cap = 1;
    tr.step_once(clips);
    tr.initial_loss = 1e-12;  // forces every following loss above the 10x bar
    bool threw = false;
    for (int i = 0; i < 100 && !threw; ++i) {
        try {
            tr.step_once(clips);
        } catch (const std::exception& e) {
            CHECK(std::string(e.what()) ==
                  "train: vae loss diverged (100 steps above 10x initial)");
            threw = true;
        }
    }
    CHECK(threw);
}

TEST_CASE("encoded dataset is normalized to unit scale") {
    auto clips = toy_clips(6);
    VaeTrainer vt;
    vt.init(toy_vae_cfg(), 9);
    EncodedDataset data = encode_dataset(vt.model, clips);
    REQUIRE(data.clips.size() == 6);
    for (size_t i = 0; i < data.clips.size(); ++i) {
        CHECK(data.clips[i].z0.shape[0] == 1 + (clips[i].video.shape[0] - 1) / 4);
        CHECK(data.clips[i].z0.shape[3] == 2);
        CHECK(data.clips[i].caption == clips[i].caption);
    }
    double acc = 0;
    int64_t n = 0;
    for (const auto& lc : data.clips) {
        for (int64_t i = 0; i < lc.z0.numel(); ++i) acc += (double)lc.z0[i] * (double)lc.z0[i];
        n += lc.z0.numel();
    }
    CHECK(std::sqrt(acc / (double)n) == doctest::Approx(1.0).epsilon(1e-4));
    CHECK(data.latent_scale > 0);
}

TEST_CASE("dit training resumes from a checkpoint without a seam") {
    auto clips = toy_clips(6);
    VaeTrainer vt;
    vt.init(toy_vae_cfg(), 9);
    EncodedDataset data = encode_dataset(vt.model, clips);

    DitTrainer straight;
    straight.init(toy_dit_cfg(), toy_opts(), 17);
    straight.latent_scale = data.latent_scale;
    std::vector<double> ref;
    for (int i = 0; i < 8; ++i) ref.push_back(straight.step_once(data));

    DitTrainer first;
    first.init(toy_dit_cfg(), toy_opts(), 17);
    first.latent_scale = data.latent_scale;
    for (int i = 0; i < 3; ++i) first.step_once(data);
    const std::string blob = serialize_checkpoint(dit_trainer_checkpoint(first));

    DitTrainer resumed = dit_trainer_from_checkpoint(deserialize_checkpoint(blob));
    CHECK(resumed.step == 3);
    CHECK(resumed.latent_scale == first.latent_scale);
    for (int i = 3; i < 8; ++i) CHECK(resumed.step_once(data) == ref[(size_t)i]);
}

TEST_CASE("eval does not disturb the training stream") {
    auto clips = toy_clips(4);
    VaeTrainer vt;
    vt.init(toy_vae_cfg(), 9);
    EncodedDataset data = encode_dataset(vt.model, clips);

    DitTrainer a, b;
    a.init(toy_dit_cfg(), toy_opts(), 5);
    b.init(toy_dit_cfg(), toy_opts(), 5);
    a.latent_scale = b.latent_scale = data.latent_scale;
    a.step_once(data);
    b.step_once(data);
    b.eval_once(data);
    b.eval_once(data);
    CHECK(a.step_once(data) == b.step_once(data));
}

TEST_CASE("growing the rope grid by extrapolation leaves old positions alone") {
    auto clips = toy_clips(4);
    VaeTrainer vt;
    vt.init(toy_vae_cfg(), 9);
    EncodedDataset data = encode_dataset(vt.model, clips);

    auto forward_fixed = [&](DitTrainer& tr) {
        DitExample ex;
        ex.t = 37;
        ex.text_ids = data.clips[0].caption;
        Rng er(123);
        ex.z = randn<float>(er, {data.clips[0].z0.shape[0], 4, 4, 2});
        Graph g;
        BoundParams P = bind_frozen(g, tr.ps);
        auto f = dit_forward(g, P, tr.cfg, tr.rope, {ex}, tr.scale_t, tr.scale_y, tr.scale_x);
        return g.val(f.v[0]);
    };
    // gates and head start at zero, which would hide position handling, so
    // every trainer gets the same random weight shake first
    auto shake = [](DitTrainer& tr) {
        Rng pr(555);
        for (auto& e : tr.ps.entries)
            for (int64_t i = 0; i < e.value.numel(); ++i)
                e.value[i] += 0.05f * (float)pr.normal();
    };

    DitTrainer base;
    base.init(toy_dit_cfg(), toy_opts(), 5);
    shake(base);
    Tensor before = forward_fixed(base);

    DitTrainer extrap;
    extrap.init(toy_dit_cfg(), toy_opts(), 5);
    shake(extrap);
    extrap.set_grid(9, 4, 4, false);
    CHECK(tensors_equal(forward_fixed(extrap), before));

    DitTrainer interp;
    interp.init(toy_dit_cfg(), toy_opts(), 5);
    shake(interp);
    interp.set_grid(9, 4, 4, true);
    CHECK(interp.scale_y == doctest::Approx(0.5));
    CHECK(!tensors_equal(forward_fixed(interp), before));
}

TEST_CASE("widening for a channel condition preserves the plain forward pass") {
    auto clips = toy_clips(4);
    VaeTrainer vt;
    vt.init(toy_vae_cfg(), 9);
    EncodedDataset data = encode_dataset(vt.model, clips);

    DitTrainer tr;
    tr.init(toy_dit_cfg(), toy_opts(), 5);
    Rng pr(555);
    for (auto& e : tr.ps.entries)
        for (int64_t i = 0; i < e.value.numel(); ++i)
            e.value[i] += 0.05f * (float)pr.normal();

    DitExample ex;
    ex.t = 37;
    ex.text_ids = data.clips[0].caption;
    Rng er(123);
    ex.z = randn<float>(er, {3, 4, 4, 2});

    Graph g0;
    BoundParams P0 = bind_frozen(g0, tr.ps);
    auto f0 = dit_forward(g0, P0, tr.cfg, tr.rope, {ex}, 1, 1, 1);
    Tensor before = g0.val(f0.v[0]);
    bool any_nonzero = false;
    for (int64_t i = 0; i < before.numel() && !any_nonzero; ++i) any_nonzero = before[i] != 0;
    REQUIRE(any_nonzero);

    widen_patch_input(tr);
    CHECK(tr.cfg.in_channel_mult == 2);
    CHECK_THROWS_WITH(widen_patch_input(tr), "i2v: model already widened");

    // anything in the new channels is ignored because their weights are zero
    DitExample wide = ex;
    Tensor junk = randn<float>(er, ex.z.shape);
    wide.z = concat_channels(ex.z, junk);
    Graph g1;
    BoundParams P1 = bind_frozen(g1, tr.ps);
    auto f1 = dit_forward(g1, P1, tr.cfg, tr.rope, {wide}, 1, 1, 1);
    CHECK(tensors_equal(g1.val(f1.v[0]), before));
}

TEST_CASE("sampling is deterministic and shape-checked") {
    auto clips = toy_clips(4);
    VaeTrainer vt;
    vt.init(toy_vae_cfg(), 9);
    EncodedDataset data = encode_dataset(vt.model, clips);

    DitTrainer tr;
    tr.init(toy_dit_cfg(), toy_opts(), 5);
    tr.latent_scale = data.latent_scale;
    for (int i = 0; i < 3; ++i) tr.step_once(data);  // leave the all-zero init

    auto caption = tokenize_prompt("red square right");
    Tensor a = sample_video(tr, vt.model, caption, 5, 16, 4, 77);
    Tensor b = sample_video(tr, vt.model, caption, 5, 16, 4, 77);
    CHECK(a.shape == std::vector<int64_t>({5, 16, 16, 3}));
    CHECK(tensors_equal(a, b));

    Tensor c = sample_video(tr, vt.model, caption, 5, 16, 4, 78);
    CHECK(!tensors_equal(a, c));

    CHECK_THROWS_WITH(sample_video(tr, vt.model, caption, 4, 16, 4, 77),
                      "sample: frames must be 1 mod 4");
    CHECK_THROWS_WITH(sample_video(tr, vt.model, caption, 5, 12, 4, 77),
                      "sample: size must be divisible by 8");
}

TEST_CASE("image conditioned sampling needs the widened model") {
    auto clips = toy_clips(4);
    VaeTrainer vt;
    vt.init(toy_vae_cfg(), 9);
    DitTrainer tr;
    tr.init(toy_dit_cfg(), toy_opts(), 5);
    Tensor frame({1, 16, 16, 3});
    auto caption = tokenize_prompt("red square static");
    CHECK_THROWS_WITH(sample_video_i2v(tr, vt.model, frame, caption, 5, 16, 2, 1),
                      "i2v: model lacks condition channels");
    widen_patch_input(tr);
    Tensor out = sample_video_i2v(tr, vt.model, frame, caption, 5, 16, 2, 1);
    CHECK(out.shape == std::vector<int64_t>({5, 16, 16, 3}));
}

TEST_CASE("quality subset keeps the least noisy clips") {
    std::vector<Clip> clips(5);
    const float noise[5] = {0.04f, 0.01f, 0.05f, 0.02f, 0.03f};
    for (int i = 0; i < 5; ++i) {
        clips[(size_t)i].noise_level = noise[i];
        clips[(size_t)i].color = i;  // marker to trace identity through the sort
    }
    auto half = hq_subset(clips, 0.5);
    REQUIRE(half.size() == 3);  // 5 * 0.5 rounded
    CHECK(half[0].color == 1);
    CHECK(half[1].color == 3);
    CHECK(half[2].color == 4);

    CHECK(hq_subset(clips, 1.0).size() == 5);
    CHECK(hq_subset(clips, 1e-9).size() == 1);
    CHECK_THROWS_WITH(hq_subset(clips, 0.0), "progressive: hq_fraction must be in (0,1]");
    CHECK_THROWS_WITH(hq_subset(clips, 1.5), "progressive: hq_fraction must be in (0,1]");
}

TEST_CASE("progressive stages double the resolution and widen the grid") {
    VaeTrainer vt;
    vt.init(toy_vae_cfg(), 9);
    DitTrainer tr;
    tr.init(toy_dit_cfg(), toy_opts(), 5);

    std::vector<StageSpec> stages(2);
    stages[0].name = "low";
    stages[0].resolution = 16;
    stages[0].frame_lengths = {1, 5};
    stages[0].num_clips = 4;
    stages[0].steps = 2;
    stages[1].name = "high";
    stages[1].resolution = 32;
    stages[1].frame_lengths = {1, 5};
    stages[1].num_clips = 4;
    stages[1].steps = 2;
    stages[1].hq_fraction = 0.5;

    auto results = train_progressive(tr, vt.model, stages, false, 99);
    REQUIRE(results.size() == 2);
    CHECK(results[0].losses.size() == 2);
    CHECK(results[1].losses.size() == 2);
    CHECK(tr.cfg.grid_y == 2);  // 32/8/2
    CHECK(tr.opts.pack_tokens >= 4 + 2 * 2 * 2);

    std::vector<StageSpec> bad(1);
    bad[0].resolution = 24;  // not a multiple of 8 * patch
    CHECK_THROWS_WITH(train_progressive(tr, vt.model, bad, false, 99),
                      "progressive: resolution must be divisible by 8*patch");
}

TEST_CASE("ablation arms start from identical ground") {
    auto clips = toy_clips(4);
    VaeTrainer vt;
    vt.init(toy_vae_cfg(), 9);
    EncodedDataset data = encode_dataset(vt.model, clips);

    DitConfig cfg = toy_dit_cfg();
    DitTrainOpts opts = toy_opts();

    // zero steps: both arms score one shared batch, and because gates and the
    // output head start at zero the two losses agree exactly
    for (const char* name :
         {"rope_vs_sinusoidal", "rope_plus_learnable", "expert_mlp", "explicit_sampling"}) {
        AblationResult res = run_ablation(name, 0, {11, 12}, data, cfg, opts);
        REQUIRE(res.a.losses.size() == 2);
        for (size_t s = 0; s < 2; ++s) {
            REQUIRE(res.a.losses[s].size() == 1);
            CHECK(res.a.losses[s][0] == res.b.losses[s][0]);
        }
    }

    // the positional-encoding arms share everything except position handling,
    // so their initial losses differ but come from identical data draws
    AblationResult rope = run_ablation("rope_vs_sinusoidal", 2, {11}, data, cfg, opts);
    CHECK(rope.a.losses[0].size() == 2);
    CHECK(rope.a.param_count == rope.b.param_count);

    CHECK_THROWS_WITH(run_ablation("nonsense", 0, {1}, data, cfg, opts),
                      "ablate: unknown ablation nonsense");
}

TEST_CASE("expert mlp ablation grows parameters by exactly one mlp per layer") {
    auto clips = toy_clips(4);
    VaeTrainer vt;
    vt.init(toy_vae_cfg(), 9);
    EncodedDataset data = encode_dataset(vt.model, clips);

    DitConfig cfg = toy_dit_cfg();
    AblationResult res = run_ablation("expert_mlp", 0, {11}, data, cfg, toy_opts());
    const int64_t d = cfg.d_model, h = cfg.mlp_ratio * d;
    const int64_t per_layer = d * h + h + h * d + d;
    CHECK(res.b.param_count - res.a.param_count == cfg.n_layers * per_layer);

    AblationResult learn = run_ablation("rope_plus_learnable", 0, {11}, data, cfg, toy_opts());
    CHECK(learn.b.param_count - learn.a.param_count ==
          toy_opts().pack_tokens * cfg.d_model);
}

TEST_CASE("ablation statistics summarize the recorded series") {
    AblationArm arm;
    arm.losses = {{4, 3, 2, 1, 0, 1, 0, 1, 0, 1}};
    detail::arm_stats(arm);
    CHECK(arm.mean_final == doctest::Approx(0.5));  // final fifth = last two entries
    // successive differences of the tail alternate around their mean
    CHECK(arm.mean_step_var > 0);

    AblationArm flat;
    flat.losses = {{2, 1, 0, 2, 1, 0, 2, 1, 0, 2}};
    detail::arm_stats(flat);
    CHECK(flat.mean_final == doctest::Approx(1.0));  // final fifth = {0, 2}
}
