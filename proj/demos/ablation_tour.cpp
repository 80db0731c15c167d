// Leave-one-domain-out comparison of the full method against its ablations,
// followed by the frozen-encoder probe that measures how much domain
// identity each latent stream still carries.

#include <cstdio>

#include "adrmx/eval.hpp"
#include "adrmx/training.hpp"

int main() {
    using namespace adrmx;

    const MultiDomainTask task = gen_gaussian_domains(4, 200, 2, 8, 1.0, 11);

    TrainConfig config;
    config.steps = 400;
    config.eval_every = 50;
    config.latent_dim = 16;
    config.encoder_hidden = {24};
    config.head_hidden = {12};
    config.discriminator_hidden = {12};

    AccessLog log;
    const std::vector<std::uint64_t> seeds = {0};
    const std::vector<ExperimentResult> rows = run_ablations(task.domains, config, seeds, &log, 2);
    std::fputs(results_table_csv(rows).c_str(), stdout);
    std::printf("target reads clean: %s\n\n", log.target_reads_clean() ? "yes" : "no");

    // The adversarial pressure needs more steps than the quick table above
    // before the invariant stream sheds domain identity.
    const MultiDomainTask probe_task = gen_gaussian_domains(4, 300, 2, 6, 1.0, 41);
    TrainConfig probe_train;
    probe_train.steps = 1500;
    probe_train.batch_per_domain = 8;
    probe_train.eta_gen = 3e-3;
    probe_train.latent_dim = 16;
    probe_train.encoder_hidden = {24};
    probe_train.head_hidden = {8};
    probe_train.discriminator_hidden = {8};
    probe_train.eval_every = 100;
    probe_train.seed = 7;
    const TrainResult run = train_on_sources(probe_task.sources(), probe_train);
    ProbeConfig probe;
    probe.steps = 1000;
    probe.batch_per_domain = 8;
    probe.hidden = {16};
    probe.seed = 4;
    const ProbeOutcome outcome = probe_domain_invariance(run.best_params, probe_task.sources(), probe);
    std::printf("domain probe on label stream:     %.3f\n", outcome.acc_on_label);
    std::printf("domain probe on invariant stream: %.3f\n", outcome.acc_on_dinv);
    std::printf("gap: %.3f\n", outcome.gap());
    return 0;
}
