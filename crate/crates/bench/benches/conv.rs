use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use mpq_bench::reference_case;
use mpq_core::{conv_mixed, conv_reference, CostModel, IntTensor, IntWeights, LayerConfig, Precision};
use Precision::*;

const TRIPLES: [(Precision, Precision, Precision); 4] =
    [(Bits8, Bits8, Bits8), (Bits8, Bits4, Bits8), (Bits8, Bits2, Bits8), (Bits2, Bits2, Bits2)];

fn kernels(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv_mixed");
    for triple in TRIPLES {
        let case = reference_case(triple, 0);
        group.throughput(Throughput::Elements(case.cfg.macs()));
        let name = format!("{},{},{}", triple.0, triple.1, triple.2);
        for workers in [1, 8] {
            group.bench_with_input(BenchmarkId::new(&name, workers), &workers, |b, &workers| {
                b.iter(|| conv_mixed(&case.input, &case.weights, &case.cfg, &case.quant, workers).unwrap())
            });
        }
    }
    group.finish();
}

fn oracle(c: &mut Criterion) {
    let case = reference_case((Bits8, Bits8, Bits8), 0);
    let input = IntTensor::from_packed(&case.input);
    let weights = IntWeights::from_weight_tensor(&case.weights);
    c.bench_function("conv_reference/8,8,8", |b| {
        b.iter(|| conv_reference(&input, &weights, &case.cfg, &case.quant).unwrap())
    });
}

fn cost_model(c: &mut Criterion) {
    let model = CostModel::default();
    c.bench_function("cost_model/27_triples", |b| {
        b.iter(|| {
            Precision::triples()
                .map(|t| model.layer_cycles(&LayerConfig::reference(t.0, t.1, t.2), 8).unwrap().total_cycles)
                .sum::<f64>()
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = kernels, oracle, cost_model
}
criterion_main!(benches);
