#include "nextlocmoe/data_model.hpp"

#include "test_support.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <set>

namespace nextlocmoe {
namespace {

using testing::make_record;
using testing::read_file;
using testing::scratch_dir;

void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  out << s;
}

Dataset small_dataset(int users = 12, int records = 8) {
  Dataset ds;
  std::set<std::int64_t> seen;
  for (int u = 0; u < users; ++u) {
    auto& recs = ds.users["user" + std::to_string(u)];
    for (int i = 0; i < records; ++i) {
      const std::int64_t id = 1 + (u * 7 + i * 3) % 20;
      recs.push_back(make_record(id, 100.0 * static_cast<double>(id % 5), 50.0 * static_cast<double>(id / 5), i % 7,
                                 (3 * i) % 24, 1.5 * i, 10 * i));
      if (seen.insert(id).second) ds.locations.push_back(recs.back().location);
    }
  }
  std::sort(ds.locations.begin(), ds.locations.end(), [](auto& a, auto& b) { return a.id < b.id; });
  return ds;
}

TEST(DataModel, CsvRoundTripIsExact) {
  const auto dir = scratch_dir("csv_roundtrip");
  Dataset ds = small_dataset();
  // 0.1 + 0.2 needs all 17 significant digits to survive the text round trip.
  const std::int64_t moved = ds.locations.front().id;
  ds.locations.front().x = 0.1 + 0.2;
  for (auto& [u, recs] : ds.users) {
    for (auto& r : recs) {
      if (r.location.id == moved) r.location.x = 0.1 + 0.2;
    }
  }
  write_dataset(ds, dir / "records.csv", DataFormat::csv);
  const Dataset back = load_dataset(dir / "records.csv", DataFormat::csv);
  EXPECT_EQ(back.users, ds.users);
  EXPECT_EQ(back.locations, ds.locations);
  write_dataset(back, dir / "again.csv", DataFormat::csv);
  EXPECT_EQ(read_file(dir / "records.csv"), read_file(dir / "again.csv"));
}

TEST(DataModel, JsonlRoundTrip) {
  const auto dir = scratch_dir("jsonl_roundtrip");
  const Dataset ds = small_dataset();
  write_dataset(ds, dir / "records.jsonl", DataFormat::jsonl);
  const Dataset back = load_dataset(dir / "records.jsonl", data_format_from_path(dir / "records.jsonl"));
  EXPECT_EQ(back.users, ds.users);
}

TEST(DataModel, RecordsAreOrderedByTimestamp) {
  const auto dir = scratch_dir("csv_order");
  write_text(dir / "r.csv",
             "user_id,loc_id,x,y,w,d,dur,timestamp\n"
             "a,1,0,0,0,1,1,30\n"
             "a,2,1,1,0,2,1,10\n"
             "a,3,2,2,0,3,1,20\n");
  const Dataset ds = load_dataset(dir / "r.csv", DataFormat::csv);
  const auto& recs = ds.users.at("a");
  ASSERT_EQ(recs.size(), 3u);
  EXPECT_EQ(recs[0].location.id, 2);
  EXPECT_EQ(recs[1].location.id, 3);
  EXPECT_EQ(recs[2].location.id, 1);
}

TEST(DataModel, ParseErrorsCarryLineAndField) {
  const auto dir = scratch_dir("csv_errors");
  const std::string header = "user_id,loc_id,x,y,w,d,dur,timestamp\n";
  struct Case {
    std::string body;
    std::size_t line;
    std::string field;
  };
  const std::vector<Case> cases = {
      {"a,1,0,0,0,1,1,0\na,2,zz,0,0,1,1,1\n", 3, "x"},
      {"a,1,0,0,0,1,1,0\na,2,0,0,9,1,1,1\n", 3, "w"},
      {"a,1,0,0,0,24,1,0\n", 2, "d"},
      {"a,1,0,0,0,1,-1,0\n", 2, "dur"},
      {"a,1,0,0,0,1,1\n", 2, "record"},
      {"a,1,0,0,0,1,1,0\nb,1,5,0,0,1,1,0\n", 3, "loc_id"},
  };
  for (const auto& c : cases) {
    write_text(dir / "bad.csv", header + c.body);
    try {
      load_dataset(dir / "bad.csv", DataFormat::csv);
      ADD_FAILURE() << "no error for: " << c.body;
    } catch (const ParseError& e) {
      EXPECT_EQ(e.line(), c.line) << c.body << " -> " << e.what();
      EXPECT_EQ(e.field(), c.field) << c.body << " -> " << e.what();
    }
  }
  write_text(dir / "noheader.csv", "a,1,0,0,0,1,1,0\n");
  EXPECT_THROW(load_dataset(dir / "noheader.csv", DataFormat::csv), ParseError);
  EXPECT_THROW(data_format_from_path(dir / "x.parquet"), std::invalid_argument);
}

TEST(DataModel, DirectoryLoadKeepsUnvisitedLocations) {
  const auto dir = scratch_dir("dir_load");
  write_text(dir / "records.csv",
             "user_id,loc_id,x,y,w,d,dur,timestamp\n"
             "a,1,0,0,0,1,1,0\n");
  write_text(dir / "locations.csv", "loc_id,x,y,extra\n1,0,0,z\n2,10,10,z\n");
  const Dataset ds = load_dataset_dir(dir);
  ASSERT_EQ(ds.locations.size(), 2u);
  EXPECT_EQ(ds.locations[1].id, 2);
  write_text(dir / "locations.csv", "loc_id,x,y\n1,5,0\n");
  EXPECT_THROW(load_dataset_dir(dir), ValidationError);
}

TEST(DataModel, NormalizationMapsIntoUnitSquareAndInverts) {
  const Dataset ds = small_dataset();
  const Dataset n = normalize_coordinates(ds, 24.0);
  ASSERT_TRUE(n.norm_stats.has_value());
  double min_x = 1e9, max_x = -1e9;
  for (const auto& l : n.locations) {
    min_x = std::min(min_x, l.x);
    max_x = std::max(max_x, l.x);
    EXPECT_GE(l.y, 0.0);
    EXPECT_LE(l.y, 1.0);
  }
  EXPECT_DOUBLE_EQ(min_x, 0.0);
  EXPECT_DOUBLE_EQ(max_x, 1.0);
  for (const auto& [u, recs] : n.users) {
    for (const auto& r : recs) {
      EXPECT_GE(r.dur, 0.0);
      EXPECT_LE(r.dur, 1.0);
    }
  }
  // x = 100 * (id % 5) spans [0, 400], so x = 100 maps to 0.25.
  for (const auto& l : n.locations) {
    if (l.id % 5 == 1) EXPECT_DOUBLE_EQ(l.x, 0.25);
  }
  const Dataset back = denormalize_coordinates(n);
  for (std::size_t i = 0; i < ds.locations.size(); ++i) {
    EXPECT_NEAR(back.locations[i].x, ds.locations[i].x, 1e-9);
    EXPECT_NEAR(back.locations[i].y, ds.locations[i].y, 1e-9);
  }
  EXPECT_THROW(normalize_coordinates(n), std::logic_error);
}

TEST(DataModel, NormalizationRejectsDegenerateAxis) {
  Dataset ds;
  ds.locations = {{1, 0.0, 0.0}, {2, 0.0, 5.0}};
  ds.users["a"] = {make_record(1, 0, 0), make_record(2, 0, 5)};
  EXPECT_THROW(normalize_coordinates(ds), std::invalid_argument);
}

TEST(DataModel, PartitionIsDisjointCompleteAndSeeded) {
  const Dataset ds = small_dataset(40, 3);
  const UserPartition a = partition_users(ds, {}, 5);
  EXPECT_EQ(a.train.users.size(), 28u);
  EXPECT_EQ(a.val.users.size(), 4u);
  EXPECT_EQ(a.test.users.size(), 8u);
  std::set<std::string> all;
  for (const auto* part : {&a.train, &a.val, &a.test}) {
    for (const auto& [u, r] : part->users) EXPECT_TRUE(all.insert(u).second) << u << " appears twice";
    EXPECT_EQ(part->locations, ds.locations);
  }
  EXPECT_EQ(all.size(), 40u);
  const UserPartition b = partition_users(ds, {}, 5);
  EXPECT_EQ(a.test.users, b.test.users);
  const UserPartition c = partition_users(ds, {}, 6);
  EXPECT_NE(a.test.users, c.test.users);
  EXPECT_THROW(partition_users(small_dataset(9, 3), {}, 1), std::invalid_argument);
}

TEST(DataModel, WindowsFollowTheSlidingLayout) {
  std::vector<Record> recs;
  for (int i = 0; i < 10; ++i) recs.push_back(make_record(i, 0, 0, 0, 0, 0, i));
  const auto w = window_trajectories("u", recs, 3, 2, 1);
  // 10 records, span 5 plus a target -> starts 0..4.
  ASSERT_EQ(w.size(), 5u);
  EXPECT_EQ(w[0].historical.front().location.id, 0);
  EXPECT_EQ(w[0].current.front().location.id, 3);
  EXPECT_EQ(w[0].target.id, 5);
  EXPECT_EQ(w[4].target.id, 9);
  EXPECT_EQ(window_trajectories("u", recs, 3, 2, 2).size(), 3u);
  EXPECT_TRUE(window_trajectories("u", recs, 8, 2, 1).empty());
  EXPECT_THROW(window_trajectories("u", recs, 0, 2, 1), std::invalid_argument);
}

}  // namespace
}  // namespace nextlocmoe
