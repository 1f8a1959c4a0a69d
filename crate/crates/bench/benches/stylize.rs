use std::sync::Arc;
use std::time::Duration;

use criterion::{criterion_group, criterion_main, Criterion, Throughput};

use ccpl_bench::random_tensor;
use ccpl_core::{stylize_image, Encoder, Mode, SctNet, StyleTransferConfig};

/// End-to-end 512x512 stylization; criterion reports frames per second.
fn stylize_512(c: &mut Criterion) {
    let mut group = c.benchmark_group("stylize 512x512");
    group.sample_size(10).measurement_time(Duration::from_secs(30)).throughput(Throughput::Elements(1));
    for mode in [Mode::Artistic, Mode::Photorealistic] {
        let cfg = StyleTransferConfig::for_mode(mode);
        let model = SctNet::new(&cfg, Arc::new(Encoder::<f32>::random(mode, 0))).unwrap();
        let content = random_tensor(&[1, 3, 512, 512], 1);
        let style = random_tensor(&[1, 3, 512, 512], 2);
        group.bench_function(mode.as_str(), |b| b.iter(|| stylize_image(&model, &content, &style, mode).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, stylize_512);
criterion_main!(benches);
