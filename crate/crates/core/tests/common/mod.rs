//! Synthetic five-image corpus covering every input path of the converter.
#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use depthkit::depth_codec::{encode_map, DepthMap};
use depthkit::object_depth::ObjectMask;
use depthkit::raster::{self, RleMask};

pub const W: usize = 40;
pub const H: usize = 30;

fn rgb(dir: &Path, name: &str) {
    // Any RGB8 PNG of the right size stands in for the photo.
    let map = DepthMap::filled(H, W, 777).unwrap();
    raster::write_encoded_png(&dir.join(name), &encode_map(&map)).unwrap();
}

fn field(f: impl Fn(usize, usize) -> u32) -> DepthMap {
    let mut v = Vec::with_capacity(W * H);
    for y in 0..H {
        for x in 0..W {
            v.push(f(x, y));
        }
    }
    DepthMap::new(H, W, v).unwrap()
}

fn mask(f: impl Fn(usize, usize) -> bool) -> ObjectMask {
    let mut m = Vec::with_capacity(W * H);
    for y in 0..H {
        for x in 0..W {
            m.push(f(x, y));
        }
    }
    ObjectMask::new(H, W, m).unwrap()
}

fn write_relative(path: &Path) {
    use image::{ImageBuffer, Luma};
    // Inverse relative depth: larger is nearer; a gradient plus a near blob.
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(W as u32, H as u32, |x, y| {
        let near = (10..20).contains(&x) && (5..15).contains(&y);
        Luma([if near { 60000 } else { (y * 2000 + x * 37) as u16 }])
    });
    buf.save(path).unwrap();
}

/// Writes the corpus into `dir` and returns the manifest path.
pub fn build_corpus(dir: &Path) -> PathBuf {
    fs::create_dir_all(dir).unwrap();

    // 1. Sensor depth in SBD1; a two-surface cup with a PNG mask plus a box-only
    //    table; holes of missing depth; an existing conversation.
    rgb(dir, "desk.png");
    let desk = field(|x, y| match (x, y) {
        (0..=2, _) => 0,
        (5..=14, 5..=9) => 300,
        (5..=14, 10..=14) => 800,
        _ => 1500 + (y as u32) * 10,
    });
    raster::write_sbd1(&dir.join("desk.sbd"), &desk).unwrap();
    raster::write_mask_png(
        &dir.join("desk_cup.png"),
        &mask(|x, y| (5..=14).contains(&x) && (5..=14).contains(&y)),
    )
    .unwrap();

    // 2. Relative estimated depth made metric with a scene range.
    rgb(dir, "street.png");
    write_relative(&dir.join("street_rel.png"));

    // 3. Encoded RGB depth, RLE mask, explicit prompt tasks.
    rgb(dir, "shelf.png");
    let shelf = field(|x, y| if (x + y) % 7 == 0 { 0 } else { 900 + (x as u32) * 55 + (y as u32) * 3 });
    raster::write_encoded_png(&dir.join("shelf_depth.png"), &encode_map(&shelf)).unwrap();
    let jar = mask(|x, y| (20..=30).contains(&x) && (3..=12).contains(&y) && (x + y) % 3 != 0);
    fs::write(
        dir.join("shelf_jar.json"),
        serde_json::to_string(&RleMask::from_mask(&jar)).unwrap(),
    )
    .unwrap();

    // 4. 16-bit millimeter PNG, three boxes and a gripper.
    rgb(dir, "robot.png");
    let robot = field(|x, y| 400 + ((x * 31 + y * 17) % 600) as u32);
    raster::write_mm16_png(&dir.join("robot_depth.png"), &robot).unwrap();

    // 5. Far scene reaching the top of the encodable range, no annotations.
    rgb(dir, "hall.png");
    let hall = field(|x, y| if y < 3 { 0 } else { 131_071 - (x as u32) * 1000 - (y as u32) * 7 });
    raster::write_sbd1(&dir.join("hall.sbd"), &hall).unwrap();

    let lines = [
        r#"{"image_id":"desk","rgb_path":"desk.png","depth_path":"desk.sbd","depth_source":"sensor","source":"nyu_depth_v2","annotations":[{"id":"cup","name":"cup","bbox":[5,5,14,14],"mask_path":"desk_cup.png"},{"id":"table","name":"table","bbox":[0,15,39,29]},{"id":"lamp","name":"lamp","bbox":[30,0,36,6]}],"existing_conversations":[{"from":"human","value":"What is on the desk?"},{"from":"gpt","value":"A cup."}]}"#,
        r#"{"image_id":"street","rgb_path":"street.png","depth_path":"street_rel.png","depth_source":"mde","relative_depth":{"d_min_mm":2000,"d_max_mm":60000},"source":"kitti","annotations":[{"id":"car","name":"red car","bbox":[10,5,19,14]},{"id":"sign","name":"sign","bbox":[30,20,35,28]}]}"#,
        r#"{"image_id":"shelf","rgb_path":"shelf.png","depth_path":"shelf_depth.png","depth_source":"sensor","gpt_tasks":["robot_scene","depthmap_understanding"],"annotations":[{"id":"jar","name":"jar","bbox":[20,3,30,12],"mask_path":"shelf_jar.json"},{"id":"box","name":"box","bbox":[2,20,8,26]}]}"#,
        r#"{"image_id":"robot","rgb_path":"robot.png","depth_path":"robot_depth.png","depth_source":"sensor","source":"rtx","annotations":[{"id":"b1","name":"blue block","bbox":[1,1,6,6]},{"id":"b2","name":"green bowl","bbox":[12,8,20,16]},{"id":"b3","name":"sponge","bbox":[25,18,33,25]},{"id":"g","name":"gripper","bbox":[30,2,38,10]}]}"#,
        r#"{"image_id":"hall","rgb_path":"hall.png","depth_path":"hall.sbd","depth_source":"sensor","source":"s2d3d"}"#,
    ];
    let path = dir.join("manifest.jsonl");
    fs::write(&path, lines.join("\n") + "\n").unwrap();
    path
}

/// Every regular file under `dir`, sorted by relative path, with contents.
pub fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}
