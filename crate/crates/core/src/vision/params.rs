//! Closed-form trainable-parameter counts, written from the published layer
//! tables without touching the candle definitions in `arch`.

fn conv(cin: usize, cout: usize, k: usize, groups: usize, bias: bool) -> usize {
    cout * (cin / groups) * k * k + if bias { cout } else { 0 }
}

/// Affine BatchNorm / LayerNorm: weight + bias.
fn norm(c: usize) -> usize {
    2 * c
}

fn dense(i: usize, o: usize) -> usize {
    i * o + o
}

pub fn efficientnet_b0(classes: usize) -> usize {
    // (expand, kernel, stride, in, out, repeats)
    let stages = [
        (1, 3, 1, 32, 16, 1),
        (6, 3, 2, 16, 24, 2),
        (6, 5, 2, 24, 40, 2),
        (6, 3, 2, 40, 80, 3),
        (6, 5, 1, 80, 112, 3),
        (6, 5, 2, 112, 192, 4),
        (6, 3, 1, 192, 320, 1),
    ];
    let mut total = conv(3, 32, 3, 1, false) + norm(32);
    for (e, k, _, cin0, cout, n) in stages {
        for i in 0..n {
            let cin = if i == 0 { cin0 } else { cout };
            let hidden = cin * e;
            let sq = (cin / 4).max(1);
            if e != 1 {
                total += conv(cin, hidden, 1, 1, false) + norm(hidden);
            }
            total += conv(hidden, hidden, k, hidden, false) + norm(hidden);
            total += conv(hidden, sq, 1, 1, true) + conv(sq, hidden, 1, 1, true);
            total += conv(hidden, cout, 1, 1, false) + norm(cout);
        }
    }
    total + conv(320, 1280, 1, 1, false) + norm(1280) + dense(1280, classes)
}

pub fn resnet50(classes: usize) -> usize {
    let mut total = conv(3, 64, 7, 1, false) + norm(64);
    let mut cin = 64;
    for (n, w) in [(3, 64), (4, 128), (6, 256), (3, 512)] {
        for i in 0..n {
            total += conv(cin, w, 1, 1, false) + norm(w);
            total += conv(w, w, 3, 1, false) + norm(w);
            total += conv(w, 4 * w, 1, 1, false) + norm(4 * w);
            if i == 0 {
                total += conv(cin, 4 * w, 1, 1, false) + norm(4 * w);
            }
            cin = 4 * w;
        }
    }
    total + dense(2048, classes)
}

pub fn vit_b16(classes: usize, image_size: usize) -> usize {
    let (d, mlp, depth, p) = (768, 3072, 12, 16);
    let tokens = (image_size / p).pow(2) + 1;
    let block = norm(d) + dense(d, 3 * d) + dense(d, d) + norm(d) + dense(d, mlp) + dense(mlp, d);
    conv(3, d, p, 1, true) + d + tokens * d + depth * block + norm(d) + dense(d, classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn imagenet_heads_match_published_totals() {
        assert_eq!(efficientnet_b0(1000), 5_288_548);
        assert_eq!(resnet50(1000), 25_557_032);
        assert_eq!(vit_b16(1000, 224), 86_567_656);
    }

    #[test]
    fn head_swap_arithmetic() {
        assert_eq!(efficientnet_b0(1000) - efficientnet_b0(10), 990 * 1281);
        assert_eq!(resnet50(1000) - resnet50(10), 990 * 2049);
        assert_eq!(vit_b16(1000, 224) - vit_b16(10, 224), 990 * 769);
    }
}
