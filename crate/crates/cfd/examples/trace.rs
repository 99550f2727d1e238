use cfd::config::RunConfig;
use cfd::decompose::NormKind;
use cfd::train::train;

fn main() {
    let mut c = RunConfig::default();
    c.backbone.widths = [8, 12, 16, 24];
    c.backbone.embed_dim = 24;
    c.backbone.reduction = 4;
    c.backbone.input = [3, 16, 8];
    c.data.extents = [3, 16, 8];
    c.data.min_style_distance = 0.45;
    c.optim.epochs = 30;
    c.optim.steps_per_epoch = 8;
    c.optim.p = 3;
    c.optim.k_imgs = 3;
    c.backbone.input_norm = NormKind::Bn;
    c.backbone.id_norm = NormKind::Cin;
    let (_, _, rep) = train::<f32>(&c, 1).expect("train");
    for e in rep.epochs.iter() {
        println!(
            "epoch {:2} id {:7.4} tri {:7.4} dom {:7.4} tot {:7.4}",
            e.epoch, e.id_loss, e.triplet_loss, e.domain_loss, e.total_loss
        );
    }
}
