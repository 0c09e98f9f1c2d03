// deskvid: generate synthetic clips, train the video VAE and the diffusion
// transformer on them, sample videos, and check the repository's invariants,
// all at desk scale on a single CPU core.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "config.hpp"
#include "ctxpar.hpp"
#include "metrics.hpp"
#include "synthdata.hpp"
#include "trainer.hpp"
#include "verify.hpp"

namespace fs = std::filesystem;

namespace {

struct GlobalOpts {
    std::string config_path;
    uint64_t seed = 42;
    std::string out_dir = "out";
};

// every key any subcommand reads; anything else in a config file is a typo
const std::vector<std::string> kConfigSchema = {
    "data.num_clips", "data.size", "data.seed",
    "vae.base_channels", "vae.latent_channels", "vae.blocks_per_stage", "vae.l2_weight",
    "vae.perceptual_weight", "vae.kl_weight", "vae.gan_weight", "vae.gan_warmup_steps",
    "vae.steps", "vae.lr", "vae.stage2_at", "vae.ckpt_every",
    "dit.d_model", "dit.n_heads", "dit.n_layers", "dit.expert_adaln", "dit.expert_mlp",
    "dit.use_rope", "dit.learnable_abs_pos", "dit.n_ranks", "dit.pack_tokens", "dit.lr",
    "dit.caption_dropout", "dit.explicit_sampling", "dit.t_diff", "dit.steps",
    "dit.ckpt_every",
    "progressive.res1", "progressive.res2", "progressive.clips", "progressive.steps1",
    "progressive.steps2", "progressive.steps3", "progressive.lr", "progressive.hq_fraction",
};

dv::Config load_config(const GlobalOpts& g) {
    dv::Config cfg =
        g.config_path.empty() ? dv::Config::parse("") : dv::Config::parse_file(g.config_path);
    cfg.ensure_known(kConfigSchema);
    return cfg;
}

dv::SynthSpec data_spec(const dv::Config& cfg, uint64_t seed) {
    dv::SynthSpec spec;
    spec.num_clips = cfg.get_int("data.num_clips", 512);
    spec.size = cfg.get_int("data.size", 32);
    spec.seed = (uint64_t)cfg.get_int("data.seed", (int64_t)seed);
    return spec;
}

dv::VaeConfig vae_config(const dv::Config& cfg) {
    dv::VaeConfig vc;
    vc.base_channels = cfg.get_int("vae.base_channels", vc.base_channels);
    vc.latent_channels = cfg.get_int("vae.latent_channels", vc.latent_channels);
    vc.blocks_per_stage = cfg.get_int("vae.blocks_per_stage", vc.blocks_per_stage);
    vc.l2_weight = cfg.get_double("vae.l2_weight", vc.l2_weight);
    vc.perceptual_weight = cfg.get_double("vae.perceptual_weight", vc.perceptual_weight);
    vc.kl_weight = cfg.get_double("vae.kl_weight", vc.kl_weight);
    vc.gan_weight = cfg.get_double("vae.gan_weight", vc.gan_weight);
    vc.gan_warmup_steps = cfg.get_int("vae.gan_warmup_steps", vc.gan_warmup_steps);
    return vc;
}

dv::DitConfig dit_config(const dv::Config& cfg) {
    dv::DitConfig dc;
    dc.d_model = cfg.get_int("dit.d_model", dc.d_model);
    dc.n_heads = cfg.get_int("dit.n_heads", dc.n_heads);
    dc.n_layers = cfg.get_int("dit.n_layers", dc.n_layers);
    dc.expert_adaln = cfg.get_bool("dit.expert_adaln", dc.expert_adaln);
    dc.expert_mlp = cfg.get_bool("dit.expert_mlp", dc.expert_mlp);
    dc.use_rope = cfg.get_bool("dit.use_rope", dc.use_rope);
    dc.learnable_abs_pos = cfg.get_bool("dit.learnable_abs_pos", dc.learnable_abs_pos);
    return dc;
}

dv::DitTrainOpts dit_opts(const dv::Config& cfg) {
    dv::DitTrainOpts o;
    o.n_ranks = cfg.get_int("dit.n_ranks", o.n_ranks);
    o.pack_tokens = cfg.get_int("dit.pack_tokens", o.pack_tokens);
    o.lr = cfg.get_double("dit.lr", o.lr);
    o.caption_dropout = cfg.get_double("dit.caption_dropout", o.caption_dropout);
    o.explicit_sampling = cfg.get_bool("dit.explicit_sampling", o.explicit_sampling);
    o.t_diff = cfg.get_int("dit.t_diff", o.t_diff);
    return o;
}

void dump_video(const std::string& stem, const dv::Tensor& video) {
    FILE* f = std::fopen((stem + ".f32").c_str(), "wb");
    dv::check(f != nullptr, "sample: cannot write " + stem + ".f32");
    std::fwrite(video.ptr(), sizeof(float), (size_t)video.numel(), f);
    std::fclose(f);
    for (int64_t t = 0; t < video.shape[0]; ++t) {
        char name[32];
        std::snprintf(name, sizeof name, "_frame_%03lld.ppm", (long long)t);
        dv::write_ppm(stem + name, video, t);
    }
}

int cmd_gen_data(const GlobalOpts& g) {
    dv::Config cfg = load_config(g);
    dv::SynthSpec spec = data_spec(cfg, g.seed);
    dv::write_dataset(g.out_dir, spec);
    std::printf("wrote %lld clips to %s\n", (long long)spec.num_clips, g.out_dir.c_str());
    return 0;
}

int cmd_train_vae(const GlobalOpts& g, int64_t steps_flag, const std::string& resume) {
    dv::Config cfg = load_config(g);
    dv::SynthSpec spec = data_spec(cfg, g.seed);
    dv::VaeConfig vc = vae_config(cfg);
    const int64_t steps = steps_flag > 0 ? steps_flag : cfg.get_int("vae.steps", 500);
    const double lr = cfg.get_double("vae.lr", 1e-3);
    const int64_t stage2_at = cfg.get_int("vae.stage2_at", steps);  // step that lifts frames to 17
    const int64_t ckpt_every = cfg.get_int("vae.ckpt_every", 0);

    std::vector<dv::Clip> clips = dv::make_clips(spec);
    dv::VaeTrainer tr;
    tr.init(vc, g.seed, lr);
    if (!resume.empty()) dv::vae_trainer_restore(tr, dv::load_checkpoint(resume));

    fs::create_directories(g.out_dir);
    std::vector<std::vector<double>> log;
    while (tr.step < steps) {
        tr.frames_cap = tr.step < stage2_at ? 5 : 17;
        dv::VaeStepRow row = tr.step_once(clips);
        log.push_back({(double)row.step, row.loss, row.l2, row.perc, row.kl, row.gan});
        if (row.step % 50 == 0 || row.step == steps)
            std::printf("step %5lld  loss %.5f  l2 %.5f\n", (long long)row.step, row.loss,
                        row.l2);
        if (ckpt_every > 0 && row.step % ckpt_every == 0)
            dv::save_checkpoint(g.out_dir + "/vae.ckpt", dv::vae_trainer_checkpoint(tr));
    }
    dv::write_csv(g.out_dir + "/vae_log.csv", "step,loss,l2,perc,kl,gan", log);
    dv::save_checkpoint(g.out_dir + "/vae.ckpt", dv::vae_trainer_checkpoint(tr));
    std::printf("checkpoint: %s/vae.ckpt\n", g.out_dir.c_str());
    return 0;
}

dv::VaeModel load_vae_model(const std::string& path) {
    dv::Checkpoint ck = dv::load_checkpoint(path);
    dv::VaeModel m;
    m.cfg = dv::vae_cfg_from_checkpoint(ck);
    m.init(0);
    dv::params_from_checkpoint(ck, m.ps, "vae/");
    return m;
}

int cmd_train_dit(const GlobalOpts& g, int64_t steps_flag, const std::string& vae_path,
                  const std::string& resume, bool i2v) {
    dv::Config cfg = load_config(g);
    dv::SynthSpec spec = data_spec(cfg, g.seed);
    dv::DitConfig dc = dit_config(cfg);
    dv::DitTrainOpts opts = dit_opts(cfg);
    const int64_t steps = steps_flag > 0 ? steps_flag : cfg.get_int("dit.steps", 2000);
    const int64_t ckpt_every = cfg.get_int("dit.ckpt_every", 0);

    dv::VaeModel vae = load_vae_model(vae_path);
    dc.latent_channels = vae.cfg.latent_channels;
    std::printf("encoding %lld clips\n", (long long)spec.num_clips);
    dv::EncodedDataset data = dv::encode_dataset(vae, dv::make_clips(spec));

    dv::DitTrainer tr;
    if (!resume.empty()) {
        tr = dv::dit_trainer_from_checkpoint(dv::load_checkpoint(resume));
    } else {
        tr.init(dc, opts, g.seed);
        if (i2v) dv::widen_patch_input(tr);
    }
    tr.latent_scale = data.latent_scale;

    fs::create_directories(g.out_dir);
    std::vector<std::vector<double>> log;
    while (tr.step < steps) {
        const double loss = tr.step_once(data);
        log.push_back({(double)tr.step, loss});
        if (tr.step % 200 == 0 || tr.step == steps)
            std::printf("step %5lld  v-loss %.5f\n", (long long)tr.step, loss);
        if (ckpt_every > 0 && tr.step % ckpt_every == 0)
            dv::save_checkpoint(g.out_dir + "/dit.ckpt", dv::dit_trainer_checkpoint(tr));
    }
    dv::write_csv(g.out_dir + "/dit_log.csv", "step,loss", log);
    dv::save_checkpoint(g.out_dir + "/dit.ckpt", dv::dit_trainer_checkpoint(tr));
    std::printf("checkpoint: %s/dit.ckpt\n", g.out_dir.c_str());
    return 0;
}

int cmd_train_progressive(const GlobalOpts& g, const std::string& vae_path, bool interpolate) {
    dv::Config cfg = load_config(g);
    dv::DitConfig dc = dit_config(cfg);
    dv::DitTrainOpts opts = dit_opts(cfg);

    std::vector<dv::StageSpec> stages(3);
    stages[0] = {"low_res", cfg.get_int("progressive.res1", 32), {1, 5, 9, 13, 17},
                 cfg.get_int("progressive.clips", 128), cfg.get_int("progressive.steps1", 200),
                 cfg.get_double("progressive.lr", 3e-4), 1.0};
    stages[1] = {"high_res", cfg.get_int("progressive.res2", 64), {1, 5, 9, 13, 17},
                 cfg.get_int("progressive.clips", 128), cfg.get_int("progressive.steps2", 100),
                 cfg.get_double("progressive.lr", 3e-4), 1.0};
    stages[2] = {"hq_finetune", cfg.get_int("progressive.res2", 64), {1, 5, 9, 13, 17},
                 cfg.get_int("progressive.clips", 128), cfg.get_int("progressive.steps3", 50),
                 cfg.get_double("progressive.lr", 3e-4),
                 cfg.get_double("progressive.hq_fraction", 0.2)};

    dv::VaeModel vae = load_vae_model(vae_path);
    dc.latent_channels = vae.cfg.latent_channels;
    dv::DitTrainer tr;
    tr.init(dc, opts, g.seed);
    auto results = dv::train_progressive(tr, vae, stages, interpolate, g.seed);

    fs::create_directories(g.out_dir);
    for (const auto& st : results) {
        std::vector<std::vector<double>> log;
        for (size_t i = 0; i < st.losses.size(); ++i)
            log.push_back({(double)(i + 1), st.losses[i]});
        dv::write_csv(g.out_dir + "/progressive_" + st.name + ".csv", "step,loss", log);
        std::printf("stage %-12s steps %4zu  final loss %.5f\n", st.name.c_str(),
                    st.losses.size(), st.losses.empty() ? 0.0 : st.losses.back());
    }
    dv::save_checkpoint(g.out_dir + "/dit.ckpt", dv::dit_trainer_checkpoint(tr));
    return 0;
}

int cmd_sample(const GlobalOpts& g, const std::string& dit_path, const std::string& vae_path,
               const std::string& prompt, int64_t frames, int64_t size, int64_t steps) {
    dv::DitTrainer tr = dv::dit_trainer_from_checkpoint(dv::load_checkpoint(dit_path));
    dv::VaeModel vae = load_vae_model(vae_path);
    const std::vector<int64_t> caption = dv::tokenize_prompt(prompt);
    dv::Tensor video = dv::sample_video(tr, vae, caption, frames, size, steps, g.seed);

    fs::create_directories(g.out_dir);
    dump_video(g.out_dir + "/sample", video);
    const double smooth = dv::temporal_smoothness(video);
    dv::Rng nr(dv::Rng::hash_stream(g.seed, 99));
    dv::Tensor noise = dv::rand_uniform<float>(nr, video.shape, 0.0, 1.0);
    std::printf("smoothness %.6f (iid-noise baseline %.6f)\n", smooth,
                dv::temporal_smoothness(noise));
    std::printf("mean x-velocity %.4f px/frame\n", dv::mean_x_velocity(video));
    return 0;
}

int cmd_i2v(const GlobalOpts& g, const std::string& dit_path, const std::string& vae_path,
            const std::string& image_path, const std::string& prompt, int64_t frames,
            int64_t size, int64_t steps, int64_t finetune_steps) {
    dv::DitTrainer tr = dv::dit_trainer_from_checkpoint(dv::load_checkpoint(dit_path));
    dv::VaeModel vae = load_vae_model(vae_path);
    if (tr.cfg.in_channel_mult == 1) dv::widen_patch_input(tr);
    if (finetune_steps > 0) {
        dv::Config cfg = load_config(g);
        dv::SynthSpec spec = data_spec(cfg, g.seed);
        dv::EncodedDataset data = dv::encode_dataset(vae, dv::make_clips(spec));
        tr.latent_scale = data.latent_scale;
        for (int64_t i = 0; i < finetune_steps; ++i) {
            const double loss = tr.step_once(data);
            if ((i + 1) % 100 == 0)
                std::printf("i2v finetune step %5lld  v-loss %.5f\n", (long long)(i + 1), loss);
        }
    }
    dv::Tensor first = image_path.empty()
                           ? dv::crop_frames(dv::make_clip(data_spec(load_config(g), g.seed), 0).video, 1)
                           : dv::load_ppm(image_path);
    const std::vector<int64_t> caption = dv::tokenize_prompt(prompt);
    dv::Tensor video = dv::sample_video_i2v(tr, vae, first, caption, frames, size, steps, g.seed);
    fs::create_directories(g.out_dir);
    dump_video(g.out_dir + "/i2v", video);
    dv::save_checkpoint(g.out_dir + "/dit_i2v.ckpt", dv::dit_trainer_checkpoint(tr));
    std::printf("smoothness %.6f\n", dv::temporal_smoothness(video));
    return 0;
}

int cmd_ablate(const GlobalOpts& g, const std::string& name, int64_t steps, int64_t n_seeds,
               const std::string& vae_path) {
    dv::Config cfg = load_config(g);
    dv::SynthSpec spec = data_spec(cfg, g.seed);
    spec.num_clips = std::min<int64_t>(spec.num_clips, 64);  // ablations stay quick
    dv::DitConfig dc = dit_config(cfg);
    dv::DitTrainOpts opts = dit_opts(cfg);

    dv::VaeModel vae = load_vae_model(vae_path);
    dc.latent_channels = vae.cfg.latent_channels;
    dv::EncodedDataset data = dv::encode_dataset(vae, dv::make_clips(spec));

    std::vector<uint64_t> seeds;
    for (int64_t s = 0; s < n_seeds; ++s) seeds.push_back(g.seed + (uint64_t)s);
    dv::AblationResult res = dv::run_ablation(name, steps, seeds, data, dc, opts);

    fs::create_directories(g.out_dir);
    for (const dv::AblationArm* arm : {&res.a, &res.b}) {
        std::vector<std::vector<double>> log;
        for (size_t step = 0; !arm->losses.empty() && step < arm->losses[0].size(); ++step) {
            std::vector<double> row = {(double)(step + 1)};
            for (const auto& series : arm->losses) row.push_back(series[step]);
            log.push_back(std::move(row));
        }
        dv::write_csv(g.out_dir + "/ablate_" + res.name + "_" + arm->name + ".csv",
                      "step,loss_per_seed", log);
        std::printf("arm %-16s params %8lld  final %.5f  step-var %.3e\n", arm->name.c_str(),
                    (long long)arm->param_count, arm->mean_final, arm->mean_step_var);
    }
    std::printf("verdict: %s\n", res.verdict.c_str());
    return 0;
}

int cmd_ctxpar_check(const GlobalOpts& g, int ranks, int64_t frames, int64_t size) {
    dv::Config cfg = load_config(g);
    dv::VaeConfig vc = vae_config(cfg);
    dv::VaeModel m;
    m.cfg = vc;
    m.init(g.seed);

    dv::Rng rng(dv::Rng::hash_stream(g.seed, 77));
    dv::Tensor video = dv::randn<float>(rng, {frames, size, size, 3}, 0.5);
    dv::Tensor serial = dv::run_layers_plain(m.ps, m.enc, video);
    auto run = dv::run_layers_parallel(m.ps, m.enc, video, ranks, false);
    const double diff = dv::max_abs_diff(serial, run.output);

    auto rep = dv::comm_report(m.enc, frames, size, size, 3, ranks);
    std::printf("ranks %d  frames %lld  size %lld\n", ranks, (long long)frames, (long long)size);
    for (const auto& line : rep.lines)
        std::printf("  %-16s kt=%lld  halo %lld elements\n", line.name.c_str(),
                    (long long)line.kt, (long long)line.elements);
    std::printf("total halo %lld elements (%.4f%% of activations), %zu messages\n",
                (long long)rep.halo_elements, 100.0 * rep.ratio(), run.halos.size());
    std::printf("max |delta| vs serial: %.17g\n", diff);
    return diff == 0.0 ? 0 : 1;
}

int cmd_verify(bool inject_fault) {
    if (inject_fault) {
        dv::test_hooks::break_causal_pad = true;
        std::printf("fault injected: temporal padding centered instead of causal\n");
    }
    dv::VerifyReport rep = dv::run_invariants(true);
    return rep.failed == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale text-to-video diffusion stack"};
    app.require_subcommand(1);
    GlobalOpts g;
    app.add_option("--config", g.config_path, "config file (ini-style sections)");
    app.add_option("--seed", g.seed, "global seed");
    app.add_option("--out", g.out_dir, "output directory");

    auto* gen = app.add_subcommand("gen-data", "write the synthetic clip dataset");

    int64_t steps = 0;
    std::string resume, vae_path, dit_path, prompt = "red square right", image_path;
    auto* tv = app.add_subcommand("train-vae", "train the causal video VAE");
    tv->add_option("--steps", steps, "override step count");
    tv->add_option("--resume", resume, "checkpoint to resume from");

    auto* td = app.add_subcommand("train-dit", "train the diffusion transformer");
    td->add_option("--steps", steps, "override step count");
    td->add_option("--vae", vae_path, "trained vae checkpoint")->required();
    td->add_option("--resume", resume, "checkpoint to resume from");
    bool i2v_mode = false;
    td->add_flag("--i2v", i2v_mode, "train with first-frame conditioning channels");

    auto* tp = app.add_subcommand("train-progressive", "three-stage resolution schedule");
    tp->add_option("--vae", vae_path, "trained vae checkpoint")->required();
    bool interpolate = false;
    tp->add_flag("--interpolate", interpolate,
                 "rescale rope coordinates instead of extrapolating");

    int64_t frames = 5, size = 32, ddim_steps = 25, finetune = 0;
    auto* sm = app.add_subcommand("sample", "ddim-sample a video and decode it");
    sm->add_option("--dit", dit_path, "trained dit checkpoint")->required();
    sm->add_option("--vae", vae_path, "trained vae checkpoint")->required();
    sm->add_option("--prompt", prompt, "caption words, e.g. \"red square right\"");
    sm->add_option("--frames", frames, "output frame count (1 mod 4)");
    sm->add_option("--size", size, "output resolution");
    sm->add_option("--steps", ddim_steps, "ddim step count");

    auto* iv = app.add_subcommand("i2v", "animate a first frame");
    iv->add_option("--dit", dit_path, "dit checkpoint (widened on the fly)")->required();
    iv->add_option("--vae", vae_path, "trained vae checkpoint")->required();
    iv->add_option("--image", image_path, "ppm first frame (default: dataset clip 0)");
    iv->add_option("--prompt", prompt, "caption words");
    iv->add_option("--frames", frames, "output frame count (1 mod 4)");
    iv->add_option("--size", size, "output resolution");
    iv->add_option("--steps", ddim_steps, "ddim step count");
    iv->add_option("--finetune-steps", finetune, "adaptation steps before sampling");

    std::string ablation = "explicit_sampling";
    int64_t n_seeds = 3;
    auto* ab = app.add_subcommand("ablate", "paired-arm training comparison");
    ab->add_option("--name", ablation,
                   "rope_vs_sinusoidal | rope_plus_learnable | expert_mlp | explicit_sampling");
    ab->add_option("--steps", steps, "steps per arm");
    ab->add_option("--seeds", n_seeds, "seed count");
    ab->add_option("--vae", vae_path, "trained vae checkpoint")->required();

    int ranks = 4;
    int64_t cx_frames = 17, cx_size = 32;
    auto* cx = app.add_subcommand("ctxpar-check", "compare chunked encoder against serial");
    cx->add_option("--ranks", ranks, "simulated rank count");
    cx->add_option("--frames", cx_frames, "input frames (1 mod 4)");
    cx->add_option("--size", cx_size, "input resolution");

    bool inject_fault = false;
    auto* vf = app.add_subcommand("verify", "run the invariant suite");
    vf->add_flag("--inject-fault", inject_fault, "break causal padding to prove detection");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_gen_data(g);
        if (tv->parsed()) return cmd_train_vae(g, steps, resume);
        if (td->parsed()) return cmd_train_dit(g, steps, vae_path, resume, i2v_mode);
        if (tp->parsed()) return cmd_train_progressive(g, vae_path, interpolate);
        if (sm->parsed())
            return cmd_sample(g, dit_path, vae_path, prompt, frames, size, ddim_steps);
        if (iv->parsed())
            return cmd_i2v(g, dit_path, vae_path, image_path, prompt, frames, size, ddim_steps,
                           finetune);
        if (ab->parsed()) return cmd_ablate(g, ablation, steps > 0 ? steps : 60, n_seeds, vae_path);
        if (cx->parsed()) return cmd_ctxpar_check(g, ranks, cx_frames, cx_size);
        if (vf->parsed()) return cmd_verify(inject_fault);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
